//! Factor transfer with MLP paraphraser and translator.
//!
//! The paraphraser is an autoencoder `d_ψ → h → d_ψ` (ReLU hidden layer,
//! `h = ⌈d_ψ/2⌉`) trained on centered pre-trained features and then frozen;
//! its encoder half produces the teacher factors. The translator
//! `d_φ → h → h` (ReLU between) maps downstream features to student factors.
//! The regularizer is the mean squared distance between the row-normalized
//! factors.

use super::Eps;
use crate::error::{Error, Result};
use crate::numerics::{center_rows, Matrix, Tape, Var};
use crate::rng::Rng;
use crate::trainer::Adam;

/// Paraphraser pre-training length used by the experiment drivers.
pub const PARAPHRASER_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct FtNets {
    pub enc_w: Matrix,
    pub enc_b: Matrix,
    pub dec_w: Matrix,
    pub dec_b: Matrix,
    pub tr_w1: Matrix,
    pub tr_b1: Matrix,
    pub tr_w2: Matrix,
    pub tr_b2: Matrix,
    pretrained: bool,
}

const ENC_W: &str = "ft.enc.w";
const ENC_B: &str = "ft.enc.b";
const DEC_W: &str = "ft.dec.w";
const DEC_B: &str = "ft.dec.b";
const TR_W1: &str = "ft.translator.w1";
const TR_B1: &str = "ft.translator.b1";
const TR_W2: &str = "ft.translator.w2";
const TR_B2: &str = "ft.translator.b2";

fn gaussian(rows: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    rng.normal_matrix(rows, fan_in)
        .scaled(1.0 / (fan_in.max(1) as f64).sqrt())
}

impl FtNets {
    pub fn new(d_phi: usize, d_psi: usize, rng: &mut Rng) -> Self {
        let h = d_psi.div_ceil(2).max(1);
        Self {
            enc_w: gaussian(h, d_psi, rng),
            enc_b: Matrix::zeros(1, h),
            dec_w: gaussian(d_psi, h, rng),
            dec_b: Matrix::zeros(1, d_psi),
            tr_w1: gaussian(h, d_phi, rng),
            tr_b1: Matrix::zeros(1, h),
            tr_w2: gaussian(h, h, rng),
            tr_b2: Matrix::zeros(1, h),
            pretrained: false,
        }
    }

    pub fn factor_dim(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn translator_params(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            (TR_W1, &self.tr_w1),
            (TR_B1, &self.tr_b1),
            (TR_W2, &self.tr_w2),
            (TR_B2, &self.tr_b2),
        ]
    }

    pub fn translator_params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            (TR_W1, &mut self.tr_w1),
            (TR_B1, &mut self.tr_b1),
            (TR_W2, &mut self.tr_w2),
            (TR_B2, &mut self.tr_b2),
        ]
    }

    fn paraphraser_params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            (ENC_W, &mut self.enc_w),
            (ENC_B, &mut self.enc_b),
            (DEC_W, &mut self.dec_w),
            (DEC_B, &mut self.dec_b),
        ]
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul_bt(x, w)?;
    tape.add_row(z, b)
}

fn record_reconstruction(tape: &mut Tape, psi_c: Var, nets: &FtNets) -> Result<Var> {
    let ew = tape.param(ENC_W, nets.enc_w.clone());
    let eb = tape.param(ENC_B, nets.enc_b.clone());
    let dw = tape.param(DEC_W, nets.dec_w.clone());
    let db = tape.param(DEC_B, nets.dec_b.clone());
    let z = affine(tape, psi_c, ew, eb)?;
    let h = tape.relu(z);
    let recon = affine(tape, h, dw, db)?;
    let diff = tape.sub(recon, psi_c)?;
    let per_row = tape.mean_row_squared_norm(diff);
    let d = tape.value(psi_c).cols().max(1) as f64;
    Ok(tape.scale(per_row, 1.0 / d))
}

/// Mean squared reconstruction error of the paraphraser on centered `psi`.
pub fn reconstruction_mse(psi: &Matrix, nets: &FtNets) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(center_rows(psi));
    let l = record_reconstruction(&mut tape, p, nets)?;
    Ok(tape.value(l).item())
}

/// Trains the paraphraser autoencoder on centered `psi_train` with full-batch
/// Adam, then freezes it. Returns the final reconstruction MSE.
pub fn pretrain_paraphraser(
    psi_train: &Matrix,
    nets: &mut FtNets,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Usage("paraphraser pre-training needs at least one step".into()));
    }
    if psi_train.cols() != nets.enc_w.cols() {
        return Err(Error::dim("pretrain_paraphraser", psi_train.shape(), nets.enc_w.shape()));
    }
    let centered = center_rows(psi_train);
    let mut adam = Adam::default();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = tape.constant(centered.clone());
        let loss = record_reconstruction(&mut tape, p, nets)?;
        let grads = tape.backward(loss)?;
        adam.step(nets.paraphraser_params_mut(), &grads, lr);
    }
    nets.pretrained = true;
    reconstruction_mse(psi_train, nets)
}

/// Records the factor-transfer loss. Translator parameters are registered as
/// trainable when `trainable` is set; the paraphraser is always constant.
pub fn record_ft(
    tape: &mut Tape,
    phi: Var,
    psi: Var,
    nets: &FtNets,
    trainable: bool,
) -> Result<Var> {
    if !nets.pretrained {
        return Err(Error::State(
            "factor transfer needs a pre-trained paraphraser".into(),
        ));
    }
    let (a, b) = (tape.value(phi).shape(), tape.value(psi).shape());
    if a.0 != b.0 {
        return Err(Error::dim("ft_regularizer", a, b));
    }
    let eps = Eps::default().norm;

    let psi_c = tape.center_rows(psi);
    let ew = tape.constant(nets.enc_w.clone());
    let eb = tape.constant(nets.enc_b.clone());
    let z = affine(tape, psi_c, ew, eb)?;
    let teacher = tape.relu(z);

    let reg = |tape: &mut Tape, name: &'static str, m: &Matrix| {
        if trainable {
            tape.param(name, m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let w1 = reg(tape, TR_W1, &nets.tr_w1);
    let b1 = reg(tape, TR_B1, &nets.tr_b1);
    let w2 = reg(tape, TR_W2, &nets.tr_w2);
    let b2 = reg(tape, TR_B2, &nets.tr_b2);
    let phi_c = tape.center_rows(phi);
    let z1 = affine(tape, phi_c, w1, b1)?;
    let h1 = tape.relu(z1);
    let student = affine(tape, h1, w2, b2)?;

    let sn = tape.normalize_rows(student, eps);
    let tn = tape.normalize_rows(teacher, eps);
    let diff = tape.sub(sn, tn)?;
    Ok(tape.mean_row_squared_norm(diff))
}

pub fn ft_regularizer(phi: &Matrix, psi: &Matrix, nets: &FtNets) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(phi.clone());
    let q = tape.constant(psi.clone());
    let r = record_ft(&mut tape, p, q, nets, false)?;
    Ok(tape.value(r).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd, matmul, normalize_rows, random_orthogonal};

    fn pretrained_nets(d_phi: usize, d_psi: usize, seed: u64) -> (FtNets, Matrix) {
        let mut rng = Rng::new(seed);
        let mut nets = FtNets::new(d_phi, d_psi, &mut rng);
        let psi = rng.uniform_matrix(20, d_psi, -1.0, 1.0);
        pretrain_paraphraser(&psi, &mut nets, 50, 1e-2).unwrap();
        (nets, psi)
    }

    #[test]
    fn unpretrained_is_state_error() {
        let mut rng = Rng::new(1);
        let nets = FtNets::new(3, 4, &mut rng);
        assert!(matches!(
            ft_regularizer(&Matrix::zeros(4, 3), &Matrix::zeros(4, 4), &nets),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn factor_width_is_half_rounded_up() {
        let mut rng = Rng::new(1);
        assert_eq!(FtNets::new(3, 5, &mut rng).factor_dim(), 3);
        assert_eq!(FtNets::new(3, 4, &mut rng).factor_dim(), 2);
    }

    #[test]
    fn zero_when_translator_reproduces_encoder() {
        // With d_φ = d_ψ, a translator equal to the encoder followed by an
        // identity second layer reproduces the teacher factors exactly.
        let (mut nets, psi) = pretrained_nets(4, 4, 2);
        let h = nets.factor_dim();
        nets.tr_w1 = nets.enc_w.clone();
        nets.tr_b1 = nets.enc_b.clone();
        nets.tr_w2 = Matrix::identity(h);
        nets.tr_b2 = Matrix::zeros(1, h);
        assert_eq!(ft_regularizer(&psi, &psi, &nets).unwrap(), 0.0);
    }

    #[test]
    fn not_rotation_invariant() {
        let (mut nets, psi) = pretrained_nets(4, 4, 3);
        let h = nets.factor_dim();
        nets.tr_w1 = nets.enc_w.clone();
        nets.tr_b1 = nets.enc_b.clone();
        nets.tr_w2 = Matrix::identity(h);
        let base = ft_regularizer(&psi, &psi, &nets).unwrap();
        let mut rng = Rng::new(30);
        nets.tr_w2 = random_orthogonal(h, &mut rng);
        let rotated = ft_regularizer(&psi, &psi, &nets).unwrap();
        assert!(rotated > base + 1e-3, "{rotated} vs {base}");
    }

    #[test]
    fn matches_reference_forward() {
        let (nets, psi) = pretrained_nets(3, 4, 4);
        let mut rng = Rng::new(40);
        let phi = rng.uniform_matrix(20, 3, -1.0, 1.0);
        let relu = |m: Matrix| m.map(|v| v.max(0.0));
        let lin = |x: &Matrix, w: &Matrix, b: &Matrix| {
            let mut z = matmul(x, &w.transpose()).unwrap();
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z[(i, j)] += b[(0, j)];
                }
            }
            z
        };
        let t = relu(lin(&center_rows(&psi), &nets.enc_w, &nets.enc_b));
        let s = lin(
            &relu(lin(&center_rows(&phi), &nets.tr_w1, &nets.tr_b1)),
            &nets.tr_w2,
            &nets.tr_b2,
        );
        let (sn, tn) = (normalize_rows(&s, 1e-12), normalize_rows(&t, 1e-12));
        let mut total = 0.0;
        for i in 0..20 {
            for j in 0..sn.cols() {
                total += (sn[(i, j)] - tn[(i, j)]).powi(2);
            }
        }
        let expect = total / 20.0;
        assert!((ft_regularizer(&phi, &psi, &nets).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let mut rng = Rng::new(5);
        let mut nets = FtNets::new(1, 1, &mut rng);
        let psi = rng.uniform_matrix(32, 1, -1.0, 1.0);
        let before = reconstruction_mse(&psi, &nets).unwrap();
        let after = pretrain_paraphraser(&psi, &mut nets, 200, 1e-2).unwrap();
        assert!(after < before, "{after} >= {before}");
        assert!(nets.is_pretrained());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let run = || pretrained_nets(3, 5, 6).0;
        assert_eq!(run(), run());
    }

    #[test]
    fn rank_one_data_reconstructed_like_top_principal_component() {
        // Rank-1 data x = t·v: the top principal component explains all of
        // the variance, so the optimal rank-1 reconstruction error is 0. The
        // ReLU autoencoder reaches it once its hidden units sit in their
        // linear regime.
        let mut rng = Rng::new(7);
        let d = 4;
        let v: Vec<f64> = vec![0.5, -0.5, 0.5, 0.5];
        let t: Vec<f64> = (0..64).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let psi = Matrix::from_vec(64, d, t.iter().flat_map(|ti| v.iter().map(move |vj| ti * vj)).collect())
            .unwrap();

        // Power-iteration oracle for the leading component; residual of the
        // projection onto it.
        let c = center_rows(&psi);
        let cov = crate::numerics::matmul_at(&c, &c).unwrap();
        let mut u = vec![1.0; d];
        for _ in 0..200 {
            let next: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[(i, j)] * u[j]).sum()).collect();
            let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            u = next.iter().map(|x| x / n).collect();
        }
        let mut pca_residual = 0.0;
        for i in 0..64 {
            let proj: f64 = c.row(i).iter().zip(&u).map(|(a, b)| a * b).sum();
            for j in 0..d {
                pca_residual += (c[(i, j)] - proj * u[j]).powi(2);
            }
        }
        pca_residual /= (64 * d) as f64;
        assert!(pca_residual < 1e-20);

        let mut nets = FtNets::new(2, d, &mut rng);
        nets.enc_b = Matrix::filled(1, nets.factor_dim(), 2.0);
        let total_var = c.sum_squares() / (64 * d) as f64;
        let mse = pretrain_paraphraser(&psi, &mut nets, 3000, 1e-2).unwrap();
        assert!(mse <= pca_residual + 1e-4 * total_var, "mse {mse}, var {total_var}");
    }

    #[test]
    fn translator_gradients_match_finite_differences() {
        let (nets, psi) = pretrained_nets(3, 4, 8);
        let mut rng = Rng::new(80);
        let phi = rng.uniform_matrix(20, 3, -1.0, 1.0);
        let mut tape = Tape::new();
        let p = tape.param("phi", phi.clone());
        let q = tape.constant(psi.clone());
        let r = record_ft(&mut tape, p, q, &nets, true).unwrap();
        let g = tape.backward(r).unwrap();
        let num = fd::gradient(&phi, 1e-5, |x| ft_regularizer(x, &psi, &nets).unwrap());
        assert!(fd::max_rel_err(g.get("phi").unwrap(), &num) <= 1e-4);
        let num = fd::gradient(&nets.tr_w1, 1e-5, |w| {
            let mut n = nets.clone();
            n.tr_w1 = w.clone();
            ft_regularizer(&phi, &psi, &n).unwrap()
        });
        assert!(fd::max_rel_err(g.get(TR_W1).unwrap(), &num) <= 1e-4);
    }
}
