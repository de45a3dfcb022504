//! Dense matrices and a small reverse-mode tape.

mod matrix;
mod tape;

pub use matrix::{
    argmax, center_rows, column_means, dot, frob_distance, gram, log_softmax_rows, matmul,
    matmul_at, matmul_bt, normalize_rows, rbf_gram, sigmoid, squared_distance, Matrix,
};
pub use tape::{Gradients, Tape, Var};

use crate::rng::Rng;

/// Orthonormalizes the columns of a square Gaussian matrix by modified
/// Gram-Schmidt, giving a random orthogonal matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    loop {
        let g = rng.normal_matrix(n, n);
        if let Some(q) = orthonormal_columns(&g) {
            return q;
        }
    }
}

fn orthonormal_columns(a: &Matrix) -> Option<Matrix> {
    let (r, c) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| a[(i, j)]).collect()).collect();
    for j in 0..c {
        for k in 0..j {
            let proj = dot(&cols[j], &cols[k]);
            let (head, tail) = cols.split_at_mut(j);
            for (v, q) in tail[0].iter_mut().zip(&head[k]) {
                *v -= proj * q;
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm < 1e-10 {
            return None;
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = Matrix::zeros(r, c);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            q[(i, j)] = *v;
        }
    }
    Some(q)
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite differences over a single named input.

    use super::Matrix;

    pub fn gradient(x: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for k in 0..x.len() {
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + step;
            let plus = f(&probe);
            probe.data_mut()[k] = orig - step;
            let minus = f(&probe);
            probe.data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        g
    }

    /// max |a - n| / max(1, |a|, |n|) over entries.
    pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = Rng::new(3);
        let q = random_orthogonal(5, &mut rng);
        let qtq = matmul_at(&q, &q).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(5)) < 1e-12);
    }

    #[test]
    fn gram_invariant_under_feature_rotation() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let x = rng.uniform_matrix(6, 4, -1.0, 1.0);
            let q = random_orthogonal(4, &mut rng);
            let xq = matmul(&x, &q).unwrap();
            assert!(gram(&xq).max_abs_diff(&gram(&x)) <= 1e-10);
        }
    }

    #[test]
    fn centered_normalized_gram_has_unit_diagonal() {
        let mut rng = Rng::new(12);
        let x = rng.uniform_matrix(7, 3, -1.0, 1.0);
        let k = gram(&normalize_rows(&center_rows(&x), 1e-12));
        for i in 0..7 {
            assert!((k[(i, i)] - 1.0).abs() <= 1e-10);
        }
    }
}
