//! Synthetic transfer tasks with a planted label signal.
//!
//! Pre-trained features are `[signal | distractor | noise]`. Labels are drawn
//! from `softmax(signal · C / temperature)` for a random class-direction
//! matrix `C`; distractor and noise columns carry no label information. The
//! downstream input `X` is an invertible linear mixing of the signal and
//! distractor columns, so a downstream model can recover the signal but has
//! to learn which directions matter.

use serde::{Deserialize, Serialize};

use super::format::Labels;
use crate::error::{Error, Result};
use crate::numerics::{matmul, random_orthogonal, Matrix};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub d_signal: usize,
    pub d_distractor: usize,
    pub d_noise: usize,
    pub n_classes: usize,
    pub label_temperature: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Usage(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.d_signal < 1 {
            return Err(Error::Usage("d_signal must be at least 1".into()));
        }
        if !(self.label_temperature > 0.0) || !self.label_temperature.is_finite() {
            return Err(Error::Usage(format!(
                "label_temperature must be positive, got {}",
                self.label_temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub psi: Matrix,
    pub inputs: Matrix,
    pub labels: Labels,
}

pub fn synth_planted(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n_examples;
    let d_mix = spec.d_signal + spec.d_distractor;

    let class_dirs =
        Rng::derive(spec.seed, stream::CLASS_DIRECTIONS).normal_matrix(spec.d_signal, spec.n_classes);
    let signal = Rng::derive(spec.seed, stream::SIGNAL).normal_matrix(n, spec.d_signal);
    let distractor = Rng::derive(spec.seed, stream::DISTRACTOR).normal_matrix(n, spec.d_distractor);

    let mut mix_rng = Rng::derive(spec.seed, stream::MIXING);
    let mut mixing = random_orthogonal(d_mix, &mut mix_rng);
    for j in 0..d_mix {
        let s = 0.5 + 1.5 * mix_rng.uniform();
        for i in 0..d_mix {
            mixing[(i, j)] *= s;
        }
    }

    let base = Matrix::hconcat(&[&signal, &distractor])?;
    let inputs = matmul(&base, &mixing)?;

    let logits = matmul(&signal, &class_dirs)?;
    let mut label_rng = Rng::derive(spec.seed, stream::LABELS);
    let classes = (0..n)
        .map(|i| sample_softmax(logits.row(i), spec.label_temperature, label_rng.uniform()))
        .collect();
    let labels = Labels::new(classes, spec.n_classes)?;

    let psi = append_noise_features(&base, spec.d_noise, spec.seed);
    Ok(SyntheticData {
        psi,
        inputs,
        labels,
    })
}

/// Draws a class from `softmax(logits / temperature)` by inverse CDF.
fn sample_softmax(logits: &[f64], temperature: f64, u: f64) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|l| libm::exp((l - max) / temperature))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cumulative = 0.0;
    for (k, w) in weights.iter().enumerate() {
        cumulative += w / total;
        if u < cumulative {
            return k;
        }
    }
    // Rounding can leave the cumulative sum a hair below 1.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("at least one positive weight")
}

/// Appends `d_noise` i.i.d. standard normal columns to `psi`. The noise is a
/// function of `(seed, row count, d_noise)` only.
pub fn append_noise_features(psi: &Matrix, d_noise: usize, seed: u64) -> Matrix {
    if d_noise == 0 {
        return psi.clone();
    }
    let noise = Rng::derive(seed, stream::NOISE).normal_matrix(psi.rows(), d_noise);
    Matrix::hconcat(&[psi, &noise]).expect("row counts match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;

    fn spec(n: usize, d_noise: usize, temp: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_examples: n,
            d_signal: 8,
            d_distractor: 8,
            d_noise,
            n_classes: 4,
            label_temperature: temp,
            seed,
        }
    }

    #[test]
    fn column_layout() {
        let data = synth_planted(&spec(50, 6, 1.0, 1)).unwrap();
        assert_eq!(data.psi.shape(), (50, 22));
        assert_eq!(data.inputs.shape(), (50, 16));
        let zero = synth_planted(&spec(50, 0, 1.0, 1)).unwrap();
        assert_eq!(zero.psi.cols(), 16);
        assert_eq!(data.psi.col_block(0, 16), zero.psi);
        assert_eq!(data.labels, zero.labels);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_planted(&spec(100, 4, 1.0, 7)).unwrap();
        let b = synth_planted(&spec(100, 4, 1.0, 7)).unwrap();
        assert_eq!(a, b);
        let c = synth_planted(&spec(100, 4, 1.0, 8)).unwrap();
        assert_ne!(a.psi, c.psi);
    }

    #[test]
    fn zero_temperature_limit_is_argmax() {
        let s = spec(300, 0, 1e-9, 3);
        let data = synth_planted(&s).unwrap();
        let class_dirs = Rng::derive(s.seed, stream::CLASS_DIRECTIONS).normal_matrix(8, 4);
        let logits = matmul(&data.psi.col_block(0, 8), &class_dirs).unwrap();
        for i in 0..300 {
            assert_eq!(data.labels.classes[i], argmax(logits.row(i)));
        }
    }

    #[test]
    fn noise_columns_uncorrelated_with_labels() {
        let data = synth_planted(&SyntheticSpec {
            n_examples: 1000,
            d_signal: 8,
            d_distractor: 8,
            d_noise: 32,
            n_classes: 4,
            label_temperature: 1.0,
            seed: 7,
        })
        .unwrap();
        let n = 1000.0;
        for col in 16..48 {
            let x: Vec<f64> = (0..1000).map(|i| data.psi[(i, col)]).collect();
            for class in 0..4 {
                let y: Vec<f64> = data
                    .labels
                    .classes
                    .iter()
                    .map(|&c| if c == class { 1.0 } else { 0.0 })
                    .collect();
                let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
                let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
                let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
                let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
                let corr = cov / (vx * vy).sqrt();
                assert!(corr.abs() <= 0.15, "col {col} class {class}: {corr}");
            }
        }
    }

    #[test]
    fn mixing_is_invertible() {
        // X = [S|D]·M with M = Q·diag(s); recover [S|D] by least squares on
        // the normal equations and compare.
        let data = synth_planted(&spec(64, 0, 1.0, 5)).unwrap();
        let xtx = crate::numerics::matmul_at(&data.inputs, &data.inputs).unwrap();
        // Invertibility: the Gram matrix of X has full rank (positive pivots).
        let mut a = xtx.clone();
        let n = a.rows();
        for k in 0..n {
            assert!(a[(k, k)] > 1e-8, "pivot {k} = {}", a[(k, k)]);
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
    }

    #[test]
    fn append_noise_shapes_and_mean() {
        let psi = Matrix::zeros(10, 4);
        assert_eq!(append_noise_features(&psi, 0, 1), psi);
        let out = append_noise_features(&psi, 6, 1);
        assert_eq!(out.shape(), (10, 10));
        assert_eq!(out.col_block(0, 4), psi);
        let g = out.col_block(4, 10);
        let mean = g.sum() / 60.0;
        assert!(mean.abs() <= 4.0 / 60f64.sqrt(), "{mean}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(10, 0, 1.0, 1);
        s.n_classes = 1;
        assert!(synth_planted(&s).is_err());
        let mut s = spec(10, 0, 1.0, 1);
        s.d_signal = 0;
        assert!(synth_planted(&s).is_err());
        let mut s = spec(10, 0, 1.0, 1);
        s.label_temperature = 0.0;
        assert!(synth_planted(&s).is_err());
    }
}
