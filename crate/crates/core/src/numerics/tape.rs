//! Reverse-mode differentiation over a closed vocabulary of matrix ops.
//!
//! Every op that appears in the training loss or in a transfer regularizer
//! has a hand-written vector-Jacobian product here. A [`Tape`] records values
//! eagerly as ops are applied; [`Tape::backward`] walks the records in reverse
//! and returns one gradient per registered parameter.

use std::collections::BTreeMap;

use super::matrix::{self, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulCols(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    CenterRows(Var),
    NormalizeRows(Var, f64),
    Gram(Var),
    RbfGram(Var),
    FrobDistance { a: Var, b: Var, scale: f64, eps: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    MeanRowSquaredNorm(Var),
    PairwiseDistances(Var, f64),
    MeanPositive(Var),
    DivScalar(Var, Var),
    HuberMean { a: Var, b: Var, delta: f64 },
    RelationAngles(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Matrix) {
        self.map.insert(name.into(), grad);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter. Names must be unique within a tape.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let name = name.into();
        assert!(
            self.params.iter().all(|(n, _)| *n != name),
            "parameter {name} registered twice"
        );
        let v = self.push(value, Op::Leaf);
        self.params.push((name, v));
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("sub", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim("add_row", (r, c), self.shape(row)));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (v, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Multiplies column `j` of `a` by `weights[j]` (`a · diag(w)`).
    pub fn mul_cols(&mut self, a: Var, weights: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(weights) != (1, c) {
            return Err(Error::dim("mul_cols", (r, c), self.shape(weights)));
        }
        let mut value = self.value(a).clone();
        let w = self.value(weights).data().to_vec();
        for i in 0..r {
            for (v, s) in value.row_mut(i).iter_mut().zip(&w) {
                *v *= s;
            }
        }
        Ok(self.push(value, Op::MulCols(a, weights)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scaled(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(matrix::sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn center_rows(&mut self, a: Var) -> Var {
        let value = matrix::center_rows(self.value(a));
        self.push(value, Op::CenterRows(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let value = matrix::normalize_rows(self.value(a), eps);
        self.push(value, Op::NormalizeRows(a, eps))
    }

    pub fn gram(&mut self, a: Var) -> Var {
        let value = matrix::gram(self.value(a));
        self.push(value, Op::Gram(a))
    }

    pub fn rbf_gram(&mut self, a: Var) -> Var {
        let value = matrix::rbf_gram(self.value(a));
        self.push(value, Op::RbfGram(a))
    }

    pub fn frob_distance(&mut self, a: Var, b: Var, scale: f64, eps: f64) -> Result<Var> {
        let d = matrix::frob_distance(self.value(a), self.value(b), scale, eps)?;
        Ok(self.push(Matrix::scalar(d), Op::FrobDistance { a, b, scale, eps }))
    }

    /// Mean softmax cross-entropy of `logits` (B x k) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::dim("cross_entropy", (b, k), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Usage(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let logp = matrix::log_softmax_rows(self.value(logits));
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -logp[(i, y)]).sum();
        let value = Matrix::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum_squares());
        self.push(value, Op::SumSquares(a))
    }

    /// Mean over rows of the squared row norm.
    pub fn mean_row_squared_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum_squares() / m.rows() as f64);
        self.push(value, Op::MeanRowSquaredNorm(a))
    }

    /// B x B Euclidean distances `sqrt(max(‖xᵢ - xⱼ‖², eps))` with a zero
    /// diagonal.
    pub fn pairwise_distances(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.rows();
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    value[(i, j)] = matrix::squared_distance(x.row(i), x.row(j)).max(eps).sqrt();
                }
            }
        }
        self.push(value, Op::PairwiseDistances(a, eps))
    }

    /// Mean of the strictly positive entries (0 when there are none).
    pub fn mean_positive(&mut self, a: Var) -> Var {
        let (sum, count) = self
            .value(a)
            .data()
            .iter()
            .filter(|v| **v > 0.0)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        self.push(Matrix::scalar(mean), Op::MeanPositive(a))
    }

    /// Divides every entry of `a` by the 1x1 value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("div_scalar", self.shape(a), self.shape(s)));
        }
        let d = self.value(s).item();
        let value = self.value(a).map(|v| v / d);
        Ok(self.push(value, Op::DivScalar(a, s)))
    }

    /// Mean Huber (smooth-ℓ1) loss between same-shaped `a` and `b`.
    pub fn huber_mean(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("huber_mean", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| huber(x - y, delta))
            .sum();
        let value = Matrix::scalar(total / va.len().max(1) as f64);
        Ok(self.push(value, Op::HuberMean { a, b, delta }))
    }

    /// Cosines of the angles formed at every anchor: entry `[a, b·B + c]` is
    /// `⟨unit(x_b - x_a), unit(x_c - x_a)⟩`; zero-length differences give 0.
    pub fn relation_angles(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.rows();
        let units = unit_differences(x, eps);
        let mut value = Matrix::zeros(n, n * n);
        for anchor in 0..n {
            for b in 0..n {
                for c in 0..n {
                    value[(anchor, b * n + c)] =
                        matrix::dot(&units[anchor][b].0, &units[anchor][c].0);
                }
            }
        }
        self.push(value, Op::RelationAngles(a, eps))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// every registered parameter. Unused parameters get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| {
                    let (r, c) = self.shape(*v);
                    Matrix::zeros(r, c)
                });
            out.map.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matrix::matmul_bt(g, val(*b)).expect("shape checked"));
                acc(*b, matrix::matmul_at(val(*a), g).expect("shape checked"));
            }
            Op::MatMulBt(a, b) => {
                acc(*a, matrix::matmul(g, val(*b)).expect("shape checked"));
                acc(*b, matrix::matmul_at(g, val(*a)).expect("shape checked"));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                acc(*row, gr);
            }
            Op::MulCols(a, w) => {
                let (x, wv) = (val(*a), val(*w));
                let mut ga = g.clone();
                let mut gw = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga[(i, j)] = g[(i, j)] * wv.data()[j];
                        gw.data_mut()[j] += g[(i, j)] * x[(i, j)];
                    }
                }
                acc(*a, ga);
                acc(*w, gw);
            }
            Op::Scale(a, c) => acc(*a, g.scaled(*c)),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
            ),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y))),
            Op::CenterRows(a) => acc(*a, matrix::center_rows(g)),
            Op::NormalizeRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = matrix::dot(x.row(i), x.row(i)).sqrt();
                    if norm > *eps {
                        let proj = matrix::dot(y.row(i), g.row(i));
                        for j in 0..x.cols() {
                            gx[(i, j)] = (g[(i, j)] - y[(i, j)] * proj) / norm;
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::Gram(a) => {
                let sym = g.zip_map(&g.transpose(), |p, q| p + q);
                acc(*a, matrix::matmul(&sym, val(*a)).expect("square"));
            }
            Op::RbfGram(a) => {
                let x = val(*a);
                let k = &node.value;
                let n = x.rows();
                let mut gx = Matrix::zeros(n, x.cols());
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let coef = -2.0 * (g[(i, j)] + g[(j, i)]) * k[(i, j)];
                        for c in 0..x.cols() {
                            gx[(i, c)] += coef * (x[(i, c)] - x[(j, c)]);
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::FrobDistance { a, b, scale, eps } => {
                let diff = val(*a).zip_map(val(*b), |p, q| p - q);
                let root = (diff.sum_squares() + eps).sqrt();
                let coef = if root > 0.0 {
                    g.item() / (scale * root)
                } else {
                    0.0
                };
                acc(*b, diff.scaled(-coef));
                acc(*a, diff.scaled(coef));
            }
            Op::CrossEntropy { logits, labels } => {
                let logp = matrix::log_softmax_rows(val(*logits));
                let b = labels.len() as f64;
                let scale = g.item() / b;
                let mut gl = logp.map(f64::exp);
                for (i, &y) in labels.iter().enumerate() {
                    gl[(i, y)] -= 1.0;
                }
                acc(*logits, gl.scaled(scale));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumSquares(a) => acc(*a, val(*a).scaled(2.0 * g.item())),
            Op::MeanRowSquaredNorm(a) => {
                let x = val(*a);
                acc(*a, x.scaled(2.0 * g.item() / x.rows() as f64));
            }
            Op::PairwiseDistances(a, eps) => {
                let x = val(*a);
                let d = &node.value;
                let n = x.rows();
                let mut gx = Matrix::zeros(n, x.cols());
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let sq = matrix::squared_distance(x.row(i), x.row(j));
                        if sq <= *eps {
                            continue;
                        }
                        let coef = g[(i, j)] / d[(i, j)];
                        for c in 0..x.cols() {
                            let delta = coef * (x[(i, c)] - x[(j, c)]);
                            gx[(i, c)] += delta;
                            gx[(j, c)] -= delta;
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::MeanPositive(a) => {
                let x = val(*a);
                let count = x.data().iter().filter(|v| **v > 0.0).count();
                let share = if count > 0 {
                    g.item() / count as f64
                } else {
                    0.0
                };
                acc(*a, x.map(|v| if v > 0.0 { share } else { 0.0 }));
            }
            Op::DivScalar(a, s) => {
                let d = val(*s).item();
                acc(*a, g.scaled(1.0 / d));
                let dot = matrix::dot(g.data(), val(*a).data());
                acc(*s, Matrix::scalar(-dot / (d * d)));
            }
            Op::HuberMean { a, b, delta } => {
                let n = val(*a).len().max(1) as f64;
                let coef = g.item() / n;
                let ga = val(*a).zip_map(val(*b), |p, q| coef * huber_grad(p - q, *delta));
                acc(*b, ga.scaled(-1.0));
                acc(*a, ga);
            }
            Op::RelationAngles(a, eps) => {
                let x = val(*a);
                let n = x.rows();
                let d = x.cols();
                let units = unit_differences(x, *eps);
                let mut gx = Matrix::zeros(n, d);
                for anchor in 0..n {
                    // Gradient with respect to each unit vector u_{anchor,b}.
                    let mut gu = vec![vec![0.0; d]; n];
                    for b in 0..n {
                        for c in 0..n {
                            let w = g[(anchor, b * n + c)];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                gu[b][k] += w * units[anchor][c].0[k];
                                gu[c][k] += w * units[anchor][b].0[k];
                            }
                        }
                    }
                    for (b, gub) in gu.iter().enumerate() {
                        let (unit, norm) = &units[anchor][b];
                        if *norm <= *eps {
                            continue;
                        }
                        let proj = matrix::dot(unit, gub);
                        for k in 0..d {
                            let gd = (gub[k] - unit[k] * proj) / norm;
                            gx[(b, k)] += gd;
                            gx[(anchor, k)] -= gd;
                        }
                    }
                }
                acc(*a, gx);
            }
        }
    }
}

fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        0.5 * r * r / delta
    } else {
        r.abs() - 0.5 * delta
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        r / delta
    } else {
        r.signum()
    }
}

/// For every anchor `a` and target `b`: (unit(x_b - x_a), ‖x_b - x_a‖).
fn unit_differences(x: &Matrix, eps: f64) -> Vec<Vec<(Vec<f64>, f64)>> {
    let n = x.rows();
    (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    let diff: Vec<f64> =
                        x.row(b).iter().zip(x.row(a)).map(|(p, q)| p - q).collect();
                    let norm = matrix::dot(&diff, &diff).sqrt();
                    let unit = if norm > eps {
                        diff.iter().map(|v| v / norm).collect()
                    } else {
                        vec![0.0; diff.len()]
                    };
                    (unit, norm)
                })
                .collect()
        })
        .collect()
}
