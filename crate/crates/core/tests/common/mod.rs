//! Loop-level reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerics, so agreement with the
//! library is evidence rather than tautology.

#![allow(dead_code)]

use aft::numerics::Matrix;
use aft::rng::Rng;

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    rng.normal_matrix(rows, cols)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn center(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, Vec::len);
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        for r in rows.iter_mut() {
            r[j] -= mean;
        }
    }
}

pub fn normalize(rows: &mut [Vec<f64>], eps: f64) {
    for r in rows.iter_mut() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in r.iter_mut() {
            *v = if norm > eps { *v / norm } else { 0.0 };
        }
    }
}

pub fn kernel(rows: &[Vec<f64>], rbf: bool) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = if rbf {
                let mut d2 = 0.0;
                for (a, b) in rows[i].iter().zip(&rows[j]) {
                    d2 += (a - b) * (a - b);
                }
                (-d2).exp()
            } else {
                let mut s = 0.0;
                for (a, b) in rows[i].iter().zip(&rows[j]) {
                    s += a * b;
                }
                s
            };
        }
    }
    k
}

/// Weighted kernel distance with per-column weights applied to `psi`.
pub fn loop_aft(phi: &Matrix, psi: &Matrix, weights: &[f64], rbf: bool) -> f64 {
    let b = phi.rows();
    let mut p = rows_of(phi);
    let mut q = rows_of(psi);
    for r in q.iter_mut() {
        for (v, w) in r.iter_mut().zip(weights) {
            *v *= w;
        }
    }
    center(&mut p);
    center(&mut q);
    normalize(&mut p, 1e-12);
    normalize(&mut q, 1e-12);
    let (kp, kq) = (kernel(&p, rbf), kernel(&q, rbf));
    let mut s = 0.0;
    for i in 0..b {
        for j in 0..b {
            s += (kp[i][j] - kq[i][j]).powi(2);
        }
    }
    (s + 1e-12).sqrt() / b as f64
}

/// Solves `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting. `b` may have several right-hand-side columns.
pub fn solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a[i].iter().chain(&b[i]).copied().collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 1e-14, "singular system");
        for r in 0..n {
            if r != col {
                let f = aug[r][col] / p;
                if f != 0.0 {
                    for c in col..n + m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    (0..n)
        .map(|i| (0..m).map(|c| aug[i][n + c] / aug[i][i]).collect())
        .collect()
}

/// Least-squares map `W` (d_out x d_in) minimizing Σᵢ‖W xᵢ − yᵢ‖² over
/// centered rows, via the normal equations. Returns `W` and the mean
/// squared residual per row.
pub fn least_squares_map(x: &Matrix, y: &Matrix) -> (Vec<Vec<f64>>, f64) {
    let mut xs = rows_of(x);
    let mut ys = rows_of(y);
    center(&mut xs);
    center(&mut ys);
    let (dx, dy) = (x.cols(), y.cols());
    let mut xtx = vec![vec![0.0; dx]; dx];
    let mut xty = vec![vec![0.0; dy]; dx];
    for (xr, yr) in xs.iter().zip(&ys) {
        for a in 0..dx {
            for c in 0..dx {
                xtx[a][c] += xr[a] * xr[c];
            }
            for c in 0..dy {
                xty[a][c] += xr[a] * yr[c];
            }
        }
    }
    let wt = solve(&xtx, &xty);
    let w: Vec<Vec<f64>> = (0..dy).map(|o| (0..dx).map(|i| wt[i][o]).collect()).collect();
    let mut resid = 0.0;
    for (xr, yr) in xs.iter().zip(&ys) {
        for o in 0..dy {
            let pred: f64 = (0..dx).map(|i| w[o][i] * xr[i]).sum();
            resid += (pred - yr[o]).powi(2);
        }
    }
    (w, resid / xs.len() as f64)
}

/// Mean over rows of ‖rowᵢ − mean‖².
pub fn total_variance(m: &Matrix) -> f64 {
    let mut rows = rows_of(m);
    center(&mut rows);
    rows.iter().flatten().map(|v| v * v).sum::<f64>() / rows.len() as f64
}

/// Multinomial logistic regression by plain full-batch gradient descent
/// with a fixed step, written with explicit loops. Returns (W, b).
pub fn loop_softmax_regression(
    x: &Matrix,
    y: &[usize],
    k: usize,
    l2: f64,
    iters: usize,
    lr: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    for _ in 0..iters {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let xi = x.row(i);
            let z: Vec<f64> = (0..k)
                .map(|c| b[c] + (0..d).map(|j| w[c][j] * xi[j]).sum::<f64>())
                .collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == y[i] { 1.0 } else { 0.0 };
                gb[c] += g / n as f64;
                for j in 0..d {
                    gw[c][j] += g * xi[j] / n as f64;
                }
            }
        }
        for c in 0..k {
            b[c] -= lr * gb[c];
            for j in 0..d {
                w[c][j] -= lr * (gw[c][j] + l2 * w[c][j]);
            }
        }
    }
    (w, b)
}

pub fn loop_accuracy(w: &[Vec<f64>], b: &[f64], x: &Matrix, y: &[usize]) -> f64 {
    let mut hits = 0;
    for (i, &label) in y.iter().enumerate() {
        let xi = x.row(i);
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, wc) in w.iter().enumerate() {
            let z = b[c] + wc.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
            if z > best.0 {
                best = (z, c);
            }
        }
        hits += usize::from(best.1 == label);
    }
    hits as f64 / y.len() as f64
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_gradient(x: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
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

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Entries uniform in [−1, 1].
pub fn unit(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    rng.uniform_matrix(rows, cols, -1.0, 1.0)
}
