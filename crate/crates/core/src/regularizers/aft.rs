//! The adaptive feature transfer regularizer: a mini-batch distance between
//! the kernel of the downstream features and the kernel of μ-weighted
//! pre-trained features.

use serde::{Deserialize, Serialize};

use super::{Eps, Kernel};
use crate::error::{Error, Result};
use crate::numerics::{matmul_bt, sigmoid, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuMode {
    /// μ = diag(σ(s)), one logit per pre-trained feature.
    #[default]
    Diagonal,
    /// Unconstrained matrix applied as `ψ μᵀ`.
    Dense,
    /// μ = I, nothing to train.
    Identity,
}

/// Variational feature weights μ.
#[derive(Debug, Clone, PartialEq)]
pub struct MuWeights {
    mode: MuMode,
    d_psi: usize,
    param: Option<Matrix>,
}

/// μ as recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub enum MuVar {
    Diagonal(Var),
    Dense(Var),
    Identity,
}

impl MuWeights {
    pub const LOGITS: &'static str = "mu.s";
    pub const DENSE: &'static str = "mu.dense";

    /// Default initialization for `mode`: logits at 0 (all weights 0.5), or
    /// ones on the main diagonal of a `rows x d_psi` dense matrix.
    pub fn new(mode: MuMode, rows: usize, d_psi: usize) -> Self {
        match mode {
            MuMode::Diagonal => Self::diagonal(d_psi),
            MuMode::Dense => Self::dense(rows, d_psi),
            MuMode::Identity => Self::identity(d_psi),
        }
    }

    pub fn diagonal(d_psi: usize) -> Self {
        Self::from_logits(&vec![0.0; d_psi])
    }

    pub fn from_logits(s: &[f64]) -> Self {
        Self {
            mode: MuMode::Diagonal,
            d_psi: s.len(),
            param: Some(Matrix::row_vector(s)),
        }
    }

    pub fn dense(rows: usize, d_psi: usize) -> Self {
        Self::from_dense(Matrix::eye(rows, d_psi))
    }

    pub fn from_dense(m: Matrix) -> Self {
        Self {
            mode: MuMode::Dense,
            d_psi: m.cols(),
            param: Some(m),
        }
    }

    pub fn identity(d_psi: usize) -> Self {
        Self {
            mode: MuMode::Identity,
            d_psi,
            param: None,
        }
    }

    pub fn mode(&self) -> MuMode {
        self.mode
    }

    pub fn d_psi(&self) -> usize {
        self.d_psi
    }

    /// Logits `s` in diagonal mode.
    pub fn logits(&self) -> Option<&[f64]> {
        match self.mode {
            MuMode::Diagonal => self.param.as_ref().map(Matrix::data),
            _ => None,
        }
    }

    /// Per-feature weights σ(sᵢ) (diagonal) or ones (identity).
    pub fn diagonal_weights(&self) -> Result<Vec<f64>> {
        match self.mode {
            MuMode::Diagonal => Ok(self.logits().unwrap().iter().map(|&s| sigmoid(s)).collect()),
            MuMode::Identity => Ok(vec![1.0; self.d_psi]),
            MuMode::Dense => Err(Error::Usage("dense μ has no diagonal weights".into())),
        }
    }

    /// μ as an explicit matrix.
    pub fn effective(&self) -> Matrix {
        match self.mode {
            MuMode::Dense => self.param.clone().unwrap(),
            _ => {
                let w = self.diagonal_weights().unwrap();
                let mut m = Matrix::zeros(self.d_psi, self.d_psi);
                for (i, wi) in w.into_iter().enumerate() {
                    m[(i, i)] = wi;
                }
                m
            }
        }
    }

    /// `ψ μᵀ`. The identity returns `psi` unchanged.
    pub fn scale_features(&self, psi: &Matrix) -> Result<Matrix> {
        if psi.cols() != self.d_psi {
            return Err(Error::dim("mu.scale_features", psi.shape(), (self.d_psi, self.d_psi)));
        }
        match self.mode {
            MuMode::Identity => Ok(psi.clone()),
            MuMode::Diagonal => {
                let w = self.diagonal_weights()?;
                let mut out = psi.clone();
                for i in 0..out.rows() {
                    for (v, wi) in out.row_mut(i).iter_mut().zip(&w) {
                        *v *= wi;
                    }
                }
                Ok(out)
            }
            MuMode::Dense => matmul_bt(psi, self.param.as_ref().unwrap()),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> MuVar {
        match (&self.mode, &self.param) {
            (MuMode::Diagonal, Some(s)) => MuVar::Diagonal(tape.param(Self::LOGITS, s.clone())),
            (MuMode::Dense, Some(m)) => MuVar::Dense(tape.param(Self::DENSE, m.clone())),
            _ => MuVar::Identity,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match (&self.mode, &self.param) {
            (MuMode::Diagonal, Some(s)) => vec![(Self::LOGITS, s)],
            (MuMode::Dense, Some(m)) => vec![(Self::DENSE, m)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match (&self.mode, &mut self.param) {
            (MuMode::Diagonal, Some(s)) => vec![(Self::LOGITS, s)],
            (MuMode::Dense, Some(m)) => vec![(Self::DENSE, m)],
            _ => Vec::new(),
        }
    }
}

/// Scales pre-trained features by μ on the tape.
pub(super) fn record_scaled_psi(tape: &mut Tape, psi: Var, mu: &MuVar) -> Result<Var> {
    match *mu {
        MuVar::Diagonal(s) => {
            let w = tape.sigmoid(s);
            tape.mul_cols(psi, w)
        }
        MuVar::Dense(m) => tape.matmul_bt(psi, m),
        MuVar::Identity => Ok(psi),
    }
}

/// Records `(1/B)·‖K^Φ − K^{μΨ}‖_F`: scale ψ by μ, center both batches,
/// normalize rows, form the two B x B kernels, take the scaled Frobenius
/// distance.
pub fn record_aft(
    tape: &mut Tape,
    phi: Var,
    psi: Var,
    mu: &MuVar,
    kernel: Kernel,
    eps: Eps,
) -> Result<Var> {
    let b = tape.value(phi).rows();
    if b < 2 {
        return Err(Error::BatchSize {
            op: "aft_regularizer",
            need: 2,
            got: b,
        });
    }
    if tape.value(psi).rows() != b {
        return Err(Error::dim(
            "aft_regularizer",
            tape.value(phi).shape(),
            tape.value(psi).shape(),
        ));
    }
    let scaled = record_scaled_psi(tape, psi, mu)?;

    let phi_c = tape.center_rows(phi);
    let psi_c = tape.center_rows(scaled);
    let phi_n = tape.normalize_rows(phi_c, eps.norm);
    let psi_n = tape.normalize_rows(psi_c, eps.norm);

    let (k_phi, k_psi) = match kernel {
        Kernel::Linear => (tape.gram(phi_n), tape.gram(psi_n)),
        Kernel::Rbf => (tape.rbf_gram(phi_n), tape.rbf_gram(psi_n)),
    };
    tape.frob_distance(k_phi, k_psi, b as f64, eps.sqrt)
}

pub fn aft_regularizer(
    phi: &Matrix,
    psi: &Matrix,
    mu: &MuWeights,
    kernel: Kernel,
    eps: Eps,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let q = tape.constant(psi.clone());
    let m = mu.register(&mut tape);
    let d = record_aft(&mut tape, p, q, &m, kernel, eps)?;
    Ok(tape.value(d).item())
}
