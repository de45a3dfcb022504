//! Multinomial logistic regression on frozen features.
//!
//! Full-batch gradient descent with Armijo backtracking. Each trial step
//! starts from the Barzilai–Borwein estimate of the previous iterate, so the
//! solver is deterministic and needs no tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{Labels, Splits};
use crate::numerics::{argmax, log_softmax_rows, matmul_at, matmul_bt, Matrix};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// `None` starts from zero weights; `Some(seed)` from small Gaussian ones.
    pub init_seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-4,
            max_iters: 5000,
            tol: 1e-7,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub loss: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl ProbeResult {
    pub fn test_error(&self) -> f64 {
        1.0 - self.test_accuracy
    }
}

/// Weights `w` (classes × d) and biases `b` (1 × classes).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWeights {
    pub w: Matrix,
    pub b: Matrix,
}

impl ProbeWeights {
    fn logits(&self, x: &Matrix) -> Matrix {
        let mut z = matmul_bt(x, &self.w).expect("probe shapes");
        for i in 0..z.rows() {
            for (v, bias) in z.row_mut(i).iter_mut().zip(self.b.data()) {
                *v += bias;
            }
        }
        z
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows()).map(|i| argmax(z.row(i))).collect()
    }

    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(x)
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
        hits as f64 / y.len() as f64
    }

    fn axpy(&self, t: f64, dir: &ProbeWeights) -> ProbeWeights {
        ProbeWeights {
            w: self.w.zip_map(&dir.w, |a, d| a + t * d),
            b: self.b.zip_map(&dir.b, |a, d| a + t * d),
        }
    }

    fn dot(&self, other: &ProbeWeights) -> f64 {
        let d = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        d(&self.w, &other.w) + d(&self.b, &other.b)
    }
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²`, and its gradient.
pub fn probe_objective(
    p: &ProbeWeights,
    x: &Matrix,
    y: &[usize],
    l2: f64,
) -> (f64, ProbeWeights) {
    let n = x.rows() as f64;
    let logp = log_softmax_rows(&p.logits(x));
    let mut loss = 0.0;
    let mut resid = logp.map(f64::exp);
    for (i, &c) in y.iter().enumerate() {
        loss -= logp[(i, c)];
        resid[(i, c)] -= 1.0;
    }
    loss /= n;
    loss += 0.5 * l2 * p.w.sum_squares();

    let resid = resid.scaled(1.0 / n);
    let mut gw = matmul_at(&resid, x).expect("probe shapes");
    gw.add_assign(&p.w.scaled(l2));
    let mut gb = Matrix::zeros(1, resid.cols());
    for i in 0..resid.rows() {
        for (acc, v) in gb.data_mut().iter_mut().zip(resid.row(i)) {
            *acc += v;
        }
    }
    (loss, ProbeWeights { w: gw, b: gb })
}

/// Fits on `rows_fit` and returns the fitted weights, final loss, iteration
/// count and gradient norm.
pub fn fit_probe(
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeWeights, f64, usize, f64)> {
    if !x.is_finite() {
        return Err(Error::Input("probe features contain non-finite values".into()));
    }
    if x.rows() == 0 {
        return Err(Error::Input("probe needs at least one training row".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Input(format!("label {bad} out of range for {n_classes} classes")));
    }
    let d = x.cols();
    let mut p = match cfg.init_seed {
        None => ProbeWeights {
            w: Matrix::zeros(n_classes, d),
            b: Matrix::zeros(1, n_classes),
        },
        Some(seed) => {
            let mut rng = Rng::derive(seed, stream::PROBE_INIT);
            ProbeWeights {
                w: rng.normal_matrix(n_classes, d).scaled(0.1),
                b: rng.normal_matrix(1, n_classes).scaled(0.1),
            }
        }
    };

    let (mut f, mut g) = probe_objective(&p, x, y, cfg.l2_penalty);
    let mut step = 1.0;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let gnorm2 = g.dot(&g);
        if gnorm2.sqrt() <= cfg.tol {
            break;
        }
        let mut t = step;
        let (next, f_next, g_next) = loop {
            let cand = p.axpy(-t, &g);
            let (fc, gc) = probe_objective(&cand, x, y, cfg.l2_penalty);
            if fc <= f - 1e-4 * t * gnorm2 || t < 1e-14 {
                break (cand, fc, gc);
            }
            t *= 0.5;
        };
        iters += 1;
        // Barzilai–Borwein estimate for the next trial step.
        let s = next.axpy(-1.0, &p);
        let dg = g_next.axpy(-1.0, &g);
        let sy = s.dot(&dg);
        step = if sy > 0.0 {
            (s.dot(&s) / sy).clamp(1e-10, 1e10)
        } else {
            t * 2.0
        };
        let stalled = f_next >= f && t < 1e-14;
        p = next;
        f = f_next;
        g = g_next;
        if stalled {
            break;
        }
    }
    let gnorm = g.dot(&g).sqrt();
    Ok((p, f, iters, gnorm))
}

/// Fits on the full training split (train plus holdout) and scores on test.
pub fn linear_probe(
    features: &Matrix,
    labels: &Labels,
    splits: &Splits,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if features.rows() != labels.classes.len() {
        return Err(Error::dim(
            "linear_probe",
            features.shape(),
            (labels.classes.len(), 1),
        ));
    }
    splits.validate(features.rows())?;
    let fit = splits.train_full();
    let x_fit = features.select_rows(&fit);
    let y_fit = labels.select(&fit);
    let (p, loss, iterations, grad_norm) = fit_probe(&x_fit, &y_fit, labels.n_classes, cfg)?;
    let x_test = features.select_rows(&splits.test);
    Ok(ProbeResult {
        train_accuracy: p.accuracy(&x_fit, &y_fit),
        test_accuracy: p.accuracy(&x_test, &labels.select(&splits.test)),
        loss,
        iterations,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splits(n_fit: usize, n: usize) -> Splits {
        Splits {
            train: (0..n_fit).collect(),
            holdout: vec![],
            test: (n_fit..n).collect(),
        }
    }

    #[test]
    fn separable_one_dimensional() {
        let xs: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { -1.0 - i as f64 * 0.05 } else { 1.0 + i as f64 * 0.05 }).collect();
        let x = Matrix::from_vec(40, 1, xs).unwrap();
        let labels = Labels::new((0..40).map(|i| i % 2).collect(), 2).unwrap();
        let r = linear_probe(&x, &labels, &splits(30, 40), &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn independent_labels_give_chance() {
        let mut rng = Rng::new(5);
        let x = rng.normal_matrix(2000, 6);
        let labels = Labels::new((0..2000).map(|_| rng.below(4)).collect(), 4).unwrap();
        let r = linear_probe(&x, &labels, &splits(1500, 2000), &ProbeConfig::default()).unwrap();
        assert!((r.test_accuracy - 0.25).abs() <= 0.05, "{}", r.test_accuracy);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let x = rng.normal_matrix(12, 3);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let p = ProbeWeights {
            w: rng.normal_matrix(3, 3),
            b: rng.normal_matrix(1, 3),
        };
        let (_, g) = probe_objective(&p, &x, &y, 0.3);
        let num = crate::numerics::fd::gradient(&p.w, 1e-5, |w| {
            probe_objective(&ProbeWeights { w: w.clone(), b: p.b.clone() }, &x, &y, 0.3).0
        });
        assert!(crate::numerics::fd::max_rel_err(&g.w, &num) < 1e-7);
        let num_b = crate::numerics::fd::gradient(&p.b, 1e-5, |b| {
            probe_objective(&ProbeWeights { w: p.w.clone(), b: b.clone() }, &x, &y, 0.3).0
        });
        assert!(crate::numerics::fd::max_rel_err(&g.b, &num_b) < 1e-7);
    }

    #[test]
    fn convex_objective_is_init_independent() {
        let mut rng = Rng::new(7);
        let x = rng.normal_matrix(300, 5);
        let labels = Labels::new((0..300).map(|_| rng.below(3)).collect(), 3).unwrap();
        let s = splits(240, 300);
        let cfg = ProbeConfig {
            l2_penalty: 1e-2,
            ..Default::default()
        };
        let a = linear_probe(&x, &labels, &s, &cfg).unwrap();
        let b = linear_probe(&x, &labels, &s, &ProbeConfig { init_seed: Some(3), ..cfg }).unwrap();
        assert!((a.loss - b.loss).abs() <= 10.0 * cfg.tol, "{} {}", a.loss, b.loss);
        assert!(a.grad_norm <= cfg.tol);
    }

    #[test]
    fn deterministic_and_rejects_non_finite() {
        let mut rng = Rng::new(8);
        let mut x = rng.normal_matrix(50, 3);
        let labels = Labels::new((0..50).map(|i| i % 2).collect(), 2).unwrap();
        let s = splits(40, 50);
        let cfg = ProbeConfig::default();
        assert_eq!(
            linear_probe(&x, &labels, &s, &cfg).unwrap(),
            linear_probe(&x, &labels, &s, &cfg).unwrap()
        );
        x[(3, 1)] = f64::INFINITY;
        assert!(matches!(linear_probe(&x, &labels, &s, &cfg), Err(Error::Input(_))));
    }
}
