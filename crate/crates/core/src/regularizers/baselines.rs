//! Feature-space baselines: the ℓ2 objective (no kernel), feature-based
//! knowledge distillation and relational knowledge distillation.

use super::aft::{record_scaled_psi, MuVar, MuWeights};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::rng::Rng;

/// Weight of the angle term relative to the distance term in RKD.
pub const RKD_ANGLE_WEIGHT: f64 = 2.0;
pub const RKD_HUBER_DELTA: f64 = 1.0;
const RKD_EPS: f64 = 1e-12;

/// KD map `V` (d_ψ x d_φ) predicting pre-trained features from downstream
/// ones.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTransform {
    pub v: Matrix,
}

impl KdTransform {
    pub const PARAM: &'static str = "kd.v";

    /// Gaussian entries with variance `1 / d_phi`.
    pub fn new(d_phi: usize, d_psi: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d_phi.max(1) as f64).sqrt();
        Self {
            v: rng.normal_matrix(d_psi, d_phi).scaled(scale),
        }
    }

    pub fn from_matrix(v: Matrix) -> Self {
        Self { v }
    }
}

fn check_rows(op: &'static str, tape: &Tape, phi: Var, psi: Var) -> Result<()> {
    let (a, b) = (tape.value(phi).shape(), tape.value(psi).shape());
    if a.0 != b.0 {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

/// Mean over the centered batch of `‖φᵢ − μψᵢ‖²`.
pub fn record_l2(tape: &mut Tape, phi: Var, psi: Var, mu: &MuVar) -> Result<Var> {
    check_rows("l2_regularizer", tape, phi, psi)?;
    let pred = record_scaled_psi(tape, psi, mu)?;
    let phi_c = tape.center_rows(phi);
    let pred_c = tape.center_rows(pred);
    let diff = tape.sub(phi_c, pred_c)?;
    Ok(tape.mean_row_squared_norm(diff))
}

pub fn l2_regularizer(phi: &Matrix, psi: &Matrix, mu: &MuWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let q = tape.constant(psi.clone());
    let m = mu.register(&mut tape);
    let r = record_l2(&mut tape, p, q, &m)?;
    Ok(tape.value(r).item())
}

/// Mean over the centered batch of `‖Vφᵢ − ψᵢ‖²`.
pub fn record_kd(tape: &mut Tape, phi: Var, psi: Var, v: Var) -> Result<Var> {
    check_rows("kd_regularizer", tape, phi, psi)?;
    let phi_c = tape.center_rows(phi);
    let psi_c = tape.center_rows(psi);
    let pred = tape.matmul_bt(phi_c, v)?;
    let diff = tape.sub(pred, psi_c)?;
    Ok(tape.mean_row_squared_norm(diff))
}

pub fn kd_regularizer(phi: &Matrix, psi: &Matrix, v: &KdTransform) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let q = tape.constant(psi.clone());
    let vv = tape.constant(v.v.clone());
    let r = record_kd(&mut tape, p, q, vv)?;
    Ok(tape.value(r).item())
}

fn normalized_distances(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.pairwise_distances(x, RKD_EPS);
    let mean = tape.mean_positive(d);
    if tape.value(mean).item() <= RKD_EPS {
        // All points coincide; distances are all zero already.
        return Ok(d);
    }
    tape.div_scalar(d, mean)
}

/// Distance term plus twice the angle term, both Huber losses between the
/// student and teacher relations.
pub fn record_rkd(tape: &mut Tape, phi: Var, psi: Var) -> Result<Var> {
    check_rows("rkd_regularizer", tape, phi, psi)?;
    let b = tape.value(phi).rows();
    if b < 3 {
        return Err(Error::BatchSize {
            op: "rkd_regularizer",
            need: 3,
            got: b,
        });
    }
    let phi_c = tape.center_rows(phi);
    let psi_c = tape.center_rows(psi);

    let student_d = normalized_distances(tape, phi_c)?;
    let teacher_d = normalized_distances(tape, psi_c)?;
    let dist = tape.huber_mean(student_d, teacher_d, RKD_HUBER_DELTA)?;

    let student_a = tape.relation_angles(phi_c, RKD_EPS);
    let teacher_a = tape.relation_angles(psi_c, RKD_EPS);
    let angle = tape.huber_mean(student_a, teacher_a, RKD_HUBER_DELTA)?;

    let weighted = tape.scale(angle, RKD_ANGLE_WEIGHT);
    tape.add(dist, weighted)
}

pub fn rkd_regularizer(phi: &Matrix, psi: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let q = tape.constant(psi.clone());
    let r = record_rkd(&mut tape, p, q)?;
    Ok(tape.value(r).item())
}
