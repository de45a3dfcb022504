mod common;

use aft::eval::{aggregate_normalized_error, fit_probe, ErrorRecord, ProbeConfig};
use aft::models::ExtractorKind;
use aft::numerics::Matrix;
use aft::regularizers::{
    kd_regularizer, l2_regularizer, rkd_regularizer, KdTransform, MuWeights, RegularizerSpec,
};
use aft::rng::Rng;
use aft::trainer::{Batch, ModelConfig, StepRates, TrainConfig, TrainState};
use aft::featurestore::{Dataset, Labels, Splits};

use common::*;

// ---------------------------------------------------------------------------
// Two Adam steps of the joint objective, re-derived by hand.

struct RefAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for k in 0..p.len() {
            self.m[k] = 0.9 * self.m[k] + 0.1 * g[k];
            self.v[k] = 0.999 * self.v[k] + 0.001 * g[k] * g[k];
            let mh = self.m[k] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[k] / (1.0 - 0.999f64.powi(self.t));
            p[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Backpropagates through center → normalize → linear gram for one side,
/// given `dk`, the gradient with respect to that side's kernel.
fn kernel_side_backward(x: &[Vec<f64>], dk: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut c = x.to_vec();
    center(&mut c);
    let norms: Vec<f64> = c.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let u: Vec<Vec<f64>> = c
        .iter()
        .zip(&norms)
        .map(|(r, n)| r.iter().map(|v| v / n).collect())
        .collect();
    let b = x.len();
    let d = x[0].len();
    let mut du = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            for a in 0..d {
                du[i][a] += (dk[i][j] + dk[j][i]) * u[j][a];
            }
        }
    }
    let mut dc = vec![vec![0.0; d]; b];
    for i in 0..b {
        let proj: f64 = (0..d).map(|a| u[i][a] * du[i][a]).sum();
        for a in 0..d {
            dc[i][a] = (du[i][a] - u[i][a] * proj) / norms[i];
        }
    }
    for a in 0..d {
        let mean = dc.iter().map(|r| r[a]).sum::<f64>() / b as f64;
        for r in dc.iter_mut() {
            r[a] -= mean;
        }
    }
    dc
}

struct RefParams {
    w1: Vec<f64>, // d_phi x d_in
    b1: Vec<f64>,
    wh: Vec<f64>, // k x d_phi
    bh: Vec<f64>,
    s: Vec<f64>,
}

/// Returns (θ gradient of L + βδ in the order w1, b1, wh, bh; s gradient of δ).
fn reference_grads(
    p: &RefParams,
    x: &Matrix,
    y: &[usize],
    psi: &Matrix,
    beta: f64,
    dims: (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let (d_in, d_phi, k) = dims;
    let b = x.rows();
    let d_psi = psi.cols();
    let phi: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..d_phi)
                .map(|o| p.b1[o] + (0..d_in).map(|j| p.w1[o * d_in + j] * x[(i, j)]).sum::<f64>())
                .collect()
        })
        .collect();

    let mut dz = vec![vec![0.0; k]; b];
    for i in 0..b {
        let z: Vec<f64> = (0..k)
            .map(|c| p.bh[c] + (0..d_phi).map(|a| p.wh[c * d_phi + a] * phi[i][a]).sum::<f64>())
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..k {
            dz[i][c] = (e[c] / s - if c == y[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }

    let w: Vec<f64> = p.s.iter().map(|v| sigmoid(*v)).collect();
    let scaled: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..d_psi).map(|j| psi[(i, j)] * w[j]).collect())
        .collect();
    let prep = |rows: &[Vec<f64>]| {
        let mut r = rows.to_vec();
        center(&mut r);
        normalize(&mut r, 1e-12);
        kernel(&r, false)
    };
    let (kp, kq) = (prep(&phi), prep(&scaled));
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            sum += (kp[i][j] - kq[i][j]).powi(2);
        }
    }
    let root = (sum + 1e-12).sqrt();
    let g_phi: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| (kp[i][j] - kq[i][j]) / (b as f64 * root)).collect())
        .collect();
    let g_psi: Vec<Vec<f64>> = g_phi.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let dphi_reg = kernel_side_backward(&phi, &g_phi);
    let dscaled = kernel_side_backward(&scaled, &g_psi);

    let mut dphi = vec![vec![0.0; d_phi]; b];
    for i in 0..b {
        for a in 0..d_phi {
            let from_loss: f64 = (0..k).map(|c| dz[i][c] * p.wh[c * d_phi + a]).sum();
            dphi[i][a] = from_loss + beta * dphi_reg[i][a];
        }
    }

    let mut theta = Vec::new();
    for o in 0..d_phi {
        for j in 0..d_in {
            theta.push((0..b).map(|i| dphi[i][o] * x[(i, j)]).sum());
        }
    }
    for o in 0..d_phi {
        theta.push((0..b).map(|i| dphi[i][o]).sum());
    }
    for c in 0..k {
        for a in 0..d_phi {
            theta.push((0..b).map(|i| dz[i][c] * phi[i][a]).sum());
        }
    }
    for c in 0..k {
        theta.push((0..b).map(|i| dz[i][c]).sum());
    }
    let ds = (0..d_psi)
        .map(|j| (0..b).map(|i| dscaled[i][j] * psi[(i, j)]).sum::<f64>() * w[j] * (1.0 - w[j]))
        .collect();
    (theta, ds)
}

fn flat_theta(p: &RefParams) -> Vec<f64> {
    [&p.w1[..], &p.b1, &p.wh, &p.bh].concat()
}

fn set_theta(p: &mut RefParams, flat: &[f64]) {
    let (a, rest) = flat.split_at(p.w1.len());
    let (b, rest) = rest.split_at(p.b1.len());
    let (c, d) = rest.split_at(p.wh.len());
    p.w1.copy_from_slice(a);
    p.b1.copy_from_slice(b);
    p.wh.copy_from_slice(c);
    p.bh.copy_from_slice(d);
}

fn state_params(state: &TrainState) -> (Vec<f64>, Vec<f64>) {
    let l = &state.model.extractor.layers[0];
    let theta = [l.w.data(), l.b.data(), state.model.head.w.data(), state.model.head.b.data()].concat();
    let s = state.regularizer.as_ref().unwrap().mu().unwrap().logits().unwrap().to_vec();
    (theta, s)
}

#[test]
fn two_step_trajectory_matches_hand_derived_adam() {
    let (d_in, d_phi, k, d_psi, b) = (3, 2, 3, 3, 4);
    let beta = 0.7;
    let mut rng = Rng::new(2024);
    let psi_all = random(2 * b, d_psi, &mut rng);
    let x_all = random(2 * b, d_in, &mut rng);
    let y_all: Vec<usize> = (0..2 * b).map(|_| rng.below(k)).collect();

    let cfg = TrainConfig {
        seed: 13,
        model: ModelConfig { kind: ExtractorKind::Linear, hidden: vec![], d_phi, ..Default::default() },
        regularizer: Some(RegularizerSpec::aft(beta)),
        ..Default::default()
    };
    let mut state = TrainState::init(&cfg, d_in, k, &psi_all).unwrap();
    // Start μ away from the symmetric point so every logit moves differently.
    if let Some(aft::regularizers::Regularizer::Aft { mu, .. }) = &mut state.regularizer {
        *mu = MuWeights::from_logits(&[0.3, -0.8, 1.1]);
    }

    let (theta0, s0) = state_params(&state);
    let mut reference = RefParams {
        w1: vec![0.0; d_phi * d_in],
        b1: vec![0.0; d_phi],
        wh: vec![0.0; k * d_phi],
        bh: vec![0.0; k],
        s: s0,
    };
    set_theta(&mut reference, &theta0);
    let mut adam_theta = RefAdam::new(theta0.len());
    let mut adam_s = RefAdam::new(d_psi);

    let rates = StepRates { lr_theta: 0.05, lr_mu: 0.1, beta, bilevel_inner_steps: 0 };
    for step in 0..2 {
        let rows: Vec<usize> = (step * b..(step + 1) * b).collect();
        let x = x_all.select_rows(&rows);
        let psi = psi_all.select_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&r| y_all[r]).collect();

        let (g_theta, g_s) = reference_grads(&reference, &x, &y, &psi, beta, (d_in, d_phi, k));
        let mut theta = flat_theta(&reference);
        adam_theta.step(&mut theta, &g_theta, rates.lr_theta);
        set_theta(&mut reference, &theta);
        adam_s.step(&mut reference.s, &g_s, rates.lr_mu);

        state.train_step(&Batch { x, y, psi }, &rates).unwrap();
        let (lib_theta, lib_s) = state_params(&state);
        for (i, (a, r)) in lib_theta.iter().zip(&theta).enumerate() {
            assert!((a - r).abs() <= 1e-10, "step {step} theta[{i}]: {a} vs {r}");
        }
        for (i, (a, r)) in lib_s.iter().zip(&reference.s).enumerate() {
            assert!((a - r).abs() <= 1e-10, "step {step} s[{i}]: {a} vs {r}");
        }
        assert_ne!(theta, theta0);
    }
}

// ---------------------------------------------------------------------------
// Linear probe against a loop-level softmax regression.

#[test]
fn probe_matches_loop_softmax_regression() {
    let (n, d, k) = (200, 8, 3);
    let mut rng = Rng::new(77);
    let x = random(n, d, &mut rng);
    let a = random(d, k, &mut rng);
    let y: Vec<usize> = (0..n)
        .map(|i| {
            (0..k)
                .map(|c| {
                    let z: f64 = (0..d).map(|j| x[(i, j)] * a[(j, c)]).sum();
                    z + 1.5 * rng.normal()
                })
                .enumerate()
                .max_by(|p, q| p.1.total_cmp(&q.1))
                .unwrap()
                .0
        })
        .collect();
    let fit: Vec<usize> = (0..150).collect();
    let test: Vec<usize> = (150..n).collect();
    let (xf, xt) = (x.select_rows(&fit), x.select_rows(&test));
    let (yf, yt) = (&y[..150], &y[150..]);

    let cfg = ProbeConfig::default();
    let (p, ..) = fit_probe(&xf, yf, k, &cfg).unwrap();
    let (w, b) = loop_softmax_regression(&xf, yf, k, cfg.l2_penalty, 4000, 0.5);

    let lib = (p.accuracy(&xf, yf), p.accuracy(&xt, yt));
    let oracle = (loop_accuracy(&w, &b, &xf, yf), loop_accuracy(&w, &b, &xt, yt));
    assert!((lib.0 - oracle.0).abs() <= 0.01, "train {lib:?} vs {oracle:?}");
    assert!((lib.1 - oracle.1).abs() <= 0.01, "test {lib:?} vs {oracle:?}");
    assert!(lib.1 > 0.5, "probe should beat chance by a wide margin: {lib:?}");
}

// ---------------------------------------------------------------------------
// Closed-form optima of the feature-space baselines.

#[test]
fn kd_at_normal_equations_optimum_equals_residual() {
    let mut rng = Rng::new(5);
    let phi = random(4, 3, &mut rng);
    let psi = random(4, 2, &mut rng);
    let (v, resid) = least_squares_map(&phi, &psi);
    let v = Matrix::from_rows(&v);
    let at_opt = kd_regularizer(&phi, &psi, &KdTransform::from_matrix(v.clone())).unwrap();
    assert!((at_opt - resid).abs() <= 1e-8, "{at_opt} vs {resid}");

    for t in 0..10 {
        let mut moved = v.clone();
        moved.data_mut()[t % v.len()] += 0.01 * (1.0 + t as f64);
        let r = kd_regularizer(&phi, &psi, &KdTransform::from_matrix(moved)).unwrap();
        assert!(r > at_opt);
    }
}

#[test]
fn l2_at_least_squares_mu_equals_residual() {
    let mut rng = Rng::new(6);
    let phi = random(4, 2, &mut rng);
    let psi = random(4, 3, &mut rng);
    // μ maps ψ onto φ: regress φ on ψ.
    let (mu, resid) = least_squares_map(&psi, &phi);
    let mu = MuWeights::from_dense(Matrix::from_rows(&mu));
    let at_opt = l2_regularizer(&phi, &psi, &mu).unwrap();
    assert!((at_opt - resid).abs() <= 1e-8, "{at_opt} vs {resid}");
}

fn loop_rkd(phi: &Matrix, psi: &Matrix) -> f64 {
    fn huber(d: f64) -> f64 {
        if d.abs() <= 1.0 { 0.5 * d * d } else { d.abs() - 0.5 }
    }
    let prep = |m: &Matrix| {
        let mut r = rows_of(m);
        center(&mut r);
        r
    };
    let (s, t) = (prep(phi), prep(psi));
    let b = s.len();
    let dist = |x: &[Vec<f64>], i: usize, j: usize| -> f64 {
        x[i].iter().zip(&x[j]).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt()
    };
    let mean_dist = |x: &[Vec<f64>]| {
        let mut sum = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    sum += dist(x, i, j);
                }
            }
        }
        sum / (b * (b - 1)) as f64
    };
    let (ms, mt) = (mean_dist(&s), mean_dist(&t));
    let mut dist_term = 0.0;
    for i in 0..b {
        for j in 0..b {
            dist_term += huber(dist(&s, i, j) / ms - dist(&t, i, j) / mt);
        }
    }
    dist_term /= (b * b) as f64;

    let cosine = |x: &[Vec<f64>], i: usize, j: usize, l: usize| -> f64 {
        let e1: Vec<f64> = x[i].iter().zip(&x[j]).map(|(a, c)| a - c).collect();
        let e2: Vec<f64> = x[l].iter().zip(&x[j]).map(|(a, c)| a - c).collect();
        let n1 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
        e1.iter().zip(&e2).map(|(a, c)| a * c).sum::<f64>() / (n1 * n2)
    };
    let mut angle = 0.0;
    for i in 0..b {
        for j in 0..b {
            for l in 0..b {
                if i != j && l != j {
                    angle += huber(cosine(&s, i, j, l) - cosine(&t, i, j, l));
                }
            }
        }
    }
    angle /= (b * b * b) as f64;
    dist_term + 2.0 * angle
}

#[test]
fn rkd_matches_explicit_pair_and_triple_loops() {
    let mut rng = Rng::new(8);
    for _ in 0..5 {
        let phi = random(4, 3, &mut rng);
        let psi = random(4, 3, &mut rng).scaled(3.0);
        let lib = rkd_regularizer(&phi, &psi).unwrap();
        let reference = loop_rkd(&phi, &psi);
        assert!((lib - reference).abs() <= 1e-10, "{lib} vs {reference}");
    }
}

// ---------------------------------------------------------------------------
// Normalized-error aggregation against a spreadsheet-style computation.

#[test]
fn aggregate_matches_spreadsheet_computation() {
    let stl = [[0.40, 0.50, 0.20], [0.25, 0.30, 0.35]];
    let aft = [[0.30, 0.45, 0.20], [0.20, 0.33, 0.28]];
    let mut records = Vec::new();
    for (d, name) in ["a", "b"].into_iter().enumerate() {
        for seed in 0..3 {
            for (method, table) in [("stl", &stl), ("aft", &aft)] {
                records.push(ErrorRecord {
                    method: method.into(),
                    dataset: name.into(),
                    seed: seed as u64,
                    error: table[d][seed],
                });
            }
        }
    }
    let report = aggregate_normalized_error(&records).unwrap();
    assert_eq!(report.rows.len(), 12);

    // Cells normalized by hand: 0.75 0.9 1.0 0.8 1.1 0.8.
    let ratios = [0.75, 0.9, 1.0, 0.8, 1.1, 0.8];
    let mean = 5.35 / 6.0;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 5.0;
    let s = report.summary_for("aft").unwrap();
    assert_eq!(s.cells, 6);
    assert!((s.mean_normalized - mean).abs() < 1e-12);
    assert!((s.se_normalized - (var / 6.0).sqrt()).abs() < 1e-12);
    assert!((s.mean_error - 1.76 / 6.0).abs() < 1e-12);
    let stl_summary = report.summary_for("stl").unwrap();
    assert_eq!((stl_summary.mean_normalized, stl_summary.se_normalized), (1.0, 0.0));
}

#[test]
fn dataset_write_and_load_preserve_everything() {
    let mut rng = Rng::new(3);
    let n = 40;
    let data = Dataset::new(
        random(n, 3, &mut rng),
        random(n, 5, &mut rng),
        Labels::new((0..n).map(|i| i % 3).collect(), 3).unwrap(),
        Splits::protocol(n, 0.25, 3),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = data.write(dir.path()).unwrap();
    let back = Dataset::load(&written.manifest).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.splits, data.splits);
    // Features are stored as f32.
    let narrowed = data.psi.map(|v| v as f32 as f64);
    assert_eq!(back.psi, narrowed);
}
