//! Transfer regularizers.
//!
//! Each regularizer is a differentiable scalar of the downstream features
//! `phi` (B x d_φ) and the cached pre-trained features `psi` (B x d_ψ), plus
//! whatever auxiliary parameters it trains (feature weights μ, a KD map V,
//! factor-transfer networks). The `record_*` functions build the scalar on a
//! [`Tape`]; the plain functions evaluate it directly.

mod aft;
mod baselines;
mod ft;

use serde::{Deserialize, Serialize};

pub use aft::{aft_regularizer, record_aft, MuMode, MuVar, MuWeights};
pub use baselines::{
    kd_regularizer, l2_regularizer, record_kd, record_l2, record_rkd, rkd_regularizer,
    KdTransform, RKD_ANGLE_WEIGHT, RKD_HUBER_DELTA,
};
pub use ft::{ft_regularizer, pretrain_paraphraser, record_ft, FtNets, PARAPHRASER_STEPS};

use crate::error::Result;
use crate::numerics::{Matrix, Tape, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Aft,
    L2,
    Kd,
    Rkd,
    Ft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Linear,
    Rbf,
}

/// Numerical guards: row norms at or below `norm` normalize to zero, and
/// `sqrt` is added under the Frobenius root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eps {
    pub norm: f64,
    pub sqrt: f64,
}

impl Default for Eps {
    fn default() -> Self {
        Self {
            norm: 1e-12,
            sqrt: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub kernel: Kernel,
    pub mu_mode: MuMode,
    pub beta: f64,
    pub eps: Eps,
}

impl RegularizerSpec {
    pub fn aft(beta: f64) -> Self {
        Self {
            kind: RegularizerKind::Aft,
            kernel: Kernel::Linear,
            mu_mode: MuMode::Diagonal,
            beta,
            eps: Eps::default(),
        }
    }

    pub fn of_kind(kind: RegularizerKind, beta: f64) -> Self {
        Self {
            kind,
            mu_mode: if kind == RegularizerKind::L2 {
                MuMode::Dense
            } else {
                MuMode::Diagonal
            },
            ..Self::aft(beta)
        }
    }
}

/// A regularizer together with the auxiliary parameters it trains.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    Aft { mu: MuWeights, kernel: Kernel, eps: Eps },
    L2 { mu: MuWeights },
    Kd { v: KdTransform },
    Rkd,
    Ft { nets: FtNets },
}

impl Regularizer {
    /// Fresh regularizer state for features of widths `d_phi` and `d_psi`.
    /// Factor-transfer networks still need [`pretrain_paraphraser`].
    pub fn new(spec: &RegularizerSpec, d_phi: usize, d_psi: usize, rng: &mut Rng) -> Self {
        match spec.kind {
            RegularizerKind::Aft => Regularizer::Aft {
                mu: MuWeights::new(spec.mu_mode, d_psi, d_psi),
                kernel: spec.kernel,
                eps: spec.eps,
            },
            RegularizerKind::L2 => Regularizer::L2 {
                mu: MuWeights::dense(d_phi, d_psi),
            },
            RegularizerKind::Kd => Regularizer::Kd {
                v: KdTransform::new(d_phi, d_psi, rng),
            },
            RegularizerKind::Rkd => Regularizer::Rkd,
            RegularizerKind::Ft => Regularizer::Ft {
                nets: FtNets::new(d_phi, d_psi, rng),
            },
        }
    }

    /// Records the regularizer value on `tape`, registering trainable
    /// auxiliary parameters under their names.
    pub fn record(&self, tape: &mut Tape, phi: Var, psi: Var) -> Result<Var> {
        match self {
            Regularizer::Aft { mu, kernel, eps } => {
                let mu = mu.register(tape);
                record_aft(tape, phi, psi, &mu, *kernel, *eps)
            }
            Regularizer::L2 { mu } => {
                let mu = mu.register(tape);
                record_l2(tape, phi, psi, &mu)
            }
            Regularizer::Kd { v } => {
                let v = tape.param(KdTransform::PARAM, v.v.clone());
                record_kd(tape, phi, psi, v)
            }
            Regularizer::Rkd => record_rkd(tape, phi, psi),
            Regularizer::Ft { nets } => record_ft(tape, phi, psi, nets, true),
        }
    }

    /// Trainable auxiliary parameters by name.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Regularizer::Aft { mu, .. } | Regularizer::L2 { mu } => mu.params(),
            Regularizer::Kd { v } => vec![(KdTransform::PARAM, &v.v)],
            Regularizer::Rkd => Vec::new(),
            Regularizer::Ft { nets } => nets.translator_params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            Regularizer::Aft { mu, .. } | Regularizer::L2 { mu } => mu.params_mut(),
            Regularizer::Kd { v } => vec![(KdTransform::PARAM, &mut v.v)],
            Regularizer::Rkd => Vec::new(),
            Regularizer::Ft { nets } => nets.translator_params_mut(),
        }
    }

    pub fn mu(&self) -> Option<&MuWeights> {
        match self {
            Regularizer::Aft { mu, .. } | Regularizer::L2 { mu } => Some(mu),
            _ => None,
        }
    }
}
