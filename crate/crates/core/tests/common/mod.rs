//! Reference implementations that share no code with the library: a
//! one-sided Jacobi SVD and a power iteration, both on plain `Vec`s.

#![allow(dead_code, clippy::needless_range_loop)]

use muonlab::matrix::Matrix;

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_matrix(a: &Matrix) -> Self {
        Dense {
            rows: a.rows(),
            cols: a.cols(),
            data: a.to_row_major(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.rows, self.cols, &self.data).unwrap()
    }
}

/// Thin SVD `A = U diag(s) Vᵀ` by one-sided Jacobi rotations, for `m >= n`.
/// Singular values are sorted in decreasing order.
pub struct JacobiSvd {
    pub u: Dense,
    pub s: Vec<f64>,
    pub v: Dense,
}

pub fn jacobi_svd(a: &Matrix) -> JacobiSvd {
    let (m, n) = a.shape();
    assert!(m >= n, "oracle expects a tall matrix");
    let src = Dense::from_matrix(a);
    // Columns of w start as columns of A and are rotated until orthogonal.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| src.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (w[p][k], w[q][k]);
                    w[p][k] = c * x - s * y;
                    w[q][k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[p][k], v[q][k]);
                    v[p][k] = c * x - s * y;
                    v[q][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = Dense {
        rows: m,
        cols: n,
        data: vec![0.0; m * n],
    };
    let mut vd = Dense {
        rows: n,
        cols: n,
        data: vec![0.0; n * n],
    };
    let mut s = Vec::with_capacity(n);
    for (col, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        for i in 0..m {
            u.data[i * n + col] = if sj > 0.0 { w[j][i] / sj } else { 0.0 };
        }
        for i in 0..n {
            vd.data[i * n + col] = v[j][i];
        }
    }
    JacobiSvd { u, s, v: vd }
}

/// Singular values of any shape, decreasing.
pub fn oracle_singular_values(a: &Matrix) -> Vec<f64> {
    if a.rows() >= a.cols() {
        jacobi_svd(a).s
    } else {
        jacobi_svd(&a.transpose()).s
    }
}

/// `U Vᵀ` from the Jacobi SVD of a full-rank matrix.
pub fn oracle_polar(a: &Matrix) -> Matrix {
    let wide = a.rows() < a.cols();
    let tall = if wide { a.transpose() } else { a.clone() };
    let svd = jacobi_svd(&tall);
    let (m, n) = (svd.u.rows, svd.u.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| svd.u.at(i, k) * svd.v.at(j, k)).sum();
        }
    }
    let p = Matrix::from_row_slice(m, n, &out).unwrap();
    if wide {
        p.transpose()
    } else {
        p
    }
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn power_spectral_norm(a: &Matrix, iters: usize) -> f64 {
    let d = Dense::from_matrix(a);
    let (m, n) = (d.rows, d.cols);
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut y = vec![0.0; m];
    let mut sigma = 0.0;
    for _ in 0..iters {
        for i in 0..m {
            y[i] = (0..n).map(|j| d.at(i, j) * x[j]).sum();
        }
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = (0..m).map(|i| d.at(i, j) * y[i]).sum();
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    sigma
}

pub fn fro(a: &Matrix) -> f64 {
    a.to_row_major().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn fro_dist(a: &Matrix, b: &Matrix) -> f64 {
    a.to_row_major()
        .iter()
        .zip(b.to_row_major())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Central finite-difference gradient of `f` at `x` with step `h` per entry.
pub fn fd_gradient<F: Fn(&Matrix) -> f64>(f: F, x: &Matrix, h: f64) -> Matrix {
    let (m, n) = x.shape();
    let base = x.to_row_major();
    let mut g = vec![0.0; m * n];
    for k in 0..m * n {
        let step = h * base[k].abs().max(1.0);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[k] += step;
        minus[k] -= step;
        let fp = f(&Matrix::from_row_slice(m, n, &plus).unwrap());
        let fm = f(&Matrix::from_row_slice(m, n, &minus).unwrap());
        g[k] = (fp - fm) / (2.0 * step);
    }
    Matrix::from_row_slice(m, n, &g).unwrap()
}

/// One problem of each kind, small enough for dense finite differences.
pub fn problem_suite() -> Vec<muonlab::problems::ProblemSpec> {
    use muonlab::problems::{NoiseModel, ProblemSpec};
    vec![
        ProblemSpec::noisy_quadratic(
            &[1.0, 0.7, 0.5, 0.3],
            3,
            1.0,
            NoiseModel::GaussianAdditive,
            7,
        )
        .unwrap(),
        ProblemSpec::least_squares(5, 3, 64, 0.1, 10.0, NoiseModel::DataSampling, 11).unwrap(),
        ProblemSpec::logistic_matrix(4, 3, 64, 0.05, NoiseModel::DataSampling, 13).unwrap(),
    ]
}
