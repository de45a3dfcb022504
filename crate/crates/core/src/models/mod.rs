//! Small downstream models `f_θ = W ∘ φ_θ`.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax_rows, matmul_bt, Matrix, Tape, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Linear,
    #[default]
    Mlp,
}

/// One affine layer `x ↦ x Wᵀ + b` with `W` stored as out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Matrix,
}

impl Layer {
    /// Gaussian weights with variance `1 / fan_in`, zero bias.
    pub fn gaussian(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d_in.max(1) as f64).sqrt();
        Self {
            w: rng.normal_matrix(d_out, d_in).scaled(scale),
            b: Matrix::zeros(1, d_out),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = matmul_bt(x, &self.w)?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Feature extractor φ_θ. An MLP applies the activation after every layer,
/// including the last; a linear extractor is a single affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub kind: ExtractorKind,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl Extractor {
    pub fn mlp(
        d_in: usize,
        hidden: &[usize],
        d_phi: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(d_phi);
        let layers = widths
            .windows(2)
            .map(|w| Layer::gaussian(w[0], w[1], rng))
            .collect();
        Self {
            kind: ExtractorKind::Mlp,
            activation,
            layers,
        }
    }

    pub fn linear(d_in: usize, d_phi: usize, rng: &mut Rng) -> Self {
        Self {
            kind: ExtractorKind::Linear,
            activation: Activation::Tanh,
            layers: vec![Layer::gaussian(d_in, d_phi, rng)],
        }
    }

    /// Linear extractor initialized to the identity map.
    pub fn linear_identity(d: usize) -> Self {
        Self {
            kind: ExtractorKind::Linear,
            activation: Activation::Tanh,
            layers: vec![Layer {
                w: Matrix::identity(d),
                b: Matrix::zeros(1, d),
            }],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.cols())
    }

    pub fn d_phi(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows())
    }

    fn activates(&self) -> bool {
        self.kind == ExtractorKind::Mlp
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::dim("extractor", x.shape(), (self.d_in(), self.d_phi())));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.apply(&h)?;
            if self.activates() {
                let act = self.activation;
                h = h.map(|v| act.apply(v));
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Matrix,
    pub b: Matrix,
}

impl LinearHead {
    pub fn new(d_phi: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let layer = Layer::gaussian(d_phi, n_classes, rng);
        Self {
            w: layer.w,
            b: layer.b,
        }
    }

    pub fn zeros(d_phi: usize, n_classes: usize) -> Self {
        Self {
            w: Matrix::zeros(n_classes, d_phi),
            b: Matrix::zeros(1, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, phi: &Matrix) -> Result<Matrix> {
        if phi.cols() != self.w.cols() {
            return Err(Error::dim("head", phi.shape(), self.w.shape()));
        }
        Layer {
            w: self.w.clone(),
            b: self.b.clone(),
        }
        .apply(phi)
    }
}

/// Extractor plus head, the θ of the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub head: LinearHead,
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

fn layer_names(i: usize) -> (String, String) {
    (format!("extractor.{i}.w"), format!("extractor.{i}.b"))
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub phi: Var,
    pub logits: Var,
}

impl Model {
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            let (w, b) = layer_names(i);
            out.push((w, &l.w));
            out.push((b, &l.b));
        }
        out.push((HEAD_W.to_string(), &self.head.w));
        out.push((HEAD_B.to_string(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter_mut().enumerate() {
            let (w, b) = layer_names(i);
            out.push((w, &mut l.w));
            out.push((b, &mut l.b));
        }
        out.push((HEAD_W.to_string(), &mut self.head.w));
        out.push((HEAD_B.to_string(), &mut self.head.b));
        out
    }

    /// Records φ and the logits for the batch `x`, registering θ.
    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<ForwardVars> {
        let d_in = self.extractor.d_in();
        if tape.value(x).cols() != d_in {
            return Err(Error::dim(
                "forward",
                tape.value(x).shape(),
                (d_in, self.extractor.d_phi()),
            ));
        }
        let mut h = x;
        for (i, layer) in self.extractor.layers.iter().enumerate() {
            let (wn, bn) = layer_names(i);
            let w = tape.param(wn, layer.w.clone());
            let b = tape.param(bn, layer.b.clone());
            let z = tape.matmul_bt(h, w)?;
            h = tape.add_row(z, b)?;
            if self.extractor.activates() {
                h = self.extractor.activation.record(tape, h);
            }
        }
        let w = tape.param(HEAD_W, self.head.w.clone());
        let b = tape.param(HEAD_B, self.head.b.clone());
        let z = tape.matmul_bt(h, w)?;
        let logits = tape.add_row(z, b)?;
        Ok(ForwardVars { phi: h, logits })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let (_, logits) = forward(&self.extractor, &self.head, x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (name, m) in self.params() {
            ckpt.insert(name, m.clone());
        }
        ckpt
    }

    /// Overwrites every parameter whose name starts with `prefix` from the
    /// checkpoint. Shapes must match.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, slot) in self.params_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some(m) = ckpt.get(&name) else {
                return Err(Error::Input(format!("checkpoint has no tensor {name}")));
            };
            if m.shape() != slot.shape() {
                return Err(Error::dim("checkpoint load", slot.shape(), m.shape()));
            }
            *slot = m.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Features and logits for a batch, computed without recording.
pub fn forward(extractor: &Extractor, head: &LinearHead, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let phi = extractor.apply(x)?;
    let logits = head.apply(&phi)?;
    Ok((phi, logits))
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::dim("cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Usage(format!(
            "cross_entropy: label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let logp = log_softmax_rows(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -logp[(i, y)]).sum();
    Ok(total / labels.len().max(1) as f64)
}

/// Flattened outer product: entry `i·d_b + j` is `a[i]·b[j]`.
pub fn tensor_product_features(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .flat_map(|&ai| b.iter().map(move |&bj| ai * bj))
        .collect()
}

/// Row-wise [`tensor_product_features`] for two row-aligned towers.
pub fn tensor_product_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::dim("tensor_product_rows", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.rows() * a.cols() * b.cols());
    for i in 0..a.rows() {
        data.extend(tensor_product_features(a.row(i), b.row(i)));
    }
    Matrix::from_vec(a.rows(), a.cols() * b.cols(), data)
}
