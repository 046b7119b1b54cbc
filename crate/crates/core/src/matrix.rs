//! Dense real matrices and the norm, SVD and polar-factor kernels the
//! optimizers and verifier are built on.
//!
//! Every optimizer parameter, gradient, momentum buffer and update is a
//! [`Matrix`]. Construction rejects non-finite entries, so downstream code
//! never has to re-validate its inputs.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Default relative threshold below which singular values are discarded.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Frobenius norm above which a Newton–Schulz iterate is declared divergent.
const NS_DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix shape must be at least 1x1, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} entries for the given shape, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix has rank zero under rank tolerance {rank_tol}")]
    RankZero { rank_tol: f64 },
    #[error("rank tolerance must lie in [0, 1), got {0}")]
    InvalidRankTol(f64),
    #[error("operation requires rows >= cols, got {rows}x{cols}")]
    WideShape { rows: usize, cols: usize },
    #[error("Newton-Schulz iteration {iteration} diverged (Frobenius norm {norm:e})")]
    NumericalDivergence { iteration: usize, norm: f64 },
    #[error("Newton-Schulz schedule needs at least one iteration")]
    EmptySchedule,
}

/// Dense `rows x cols` real matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    /// Builds a matrix from entries listed in row-major order.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self, MatrixError> {
        check_shape(rows, cols)?;
        if data.len() != rows * cols {
            return Err(MatrixError::DataLength {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatrixError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MatrixError::DataLength {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_slice(rows.len(), cols, &data)
    }

    pub fn from_dmatrix(m: DMatrix<f64>) -> Result<Self, MatrixError> {
        check_shape(m.nrows(), m.ncols())?;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if !m[(i, j)].is_finite() {
                    return Err(MatrixError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Matrix(m))
    }

    /// Zero matrix. Panics on an empty shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "empty matrix shape {rows}x{cols}");
        Matrix(DMatrix::zeros(rows, cols))
    }

    /// Square identity. Panics when `n == 0`.
    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "empty identity");
        Matrix(DMatrix::identity(n, n))
    }

    /// Square diagonal matrix.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, MatrixError> {
        check_shape(diag.len(), diag.len())?;
        let n = diag.len();
        Self::from_dmatrix(DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { diag[i] } else { 0.0 },
        ))
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn random_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        assert!(rows >= 1 && cols >= 1, "empty matrix shape {rows}x{cols}");
        Matrix(DMatrix::from_fn(rows, cols, |_, _| {
            rng.sample(StandardNormal)
        }))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix(self.0.transpose())
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix(&self.0 * factor)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        self.same_shape(other)?;
        Ok(Matrix(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        self.same_shape(other)?;
        Ok(Matrix(&self.0 - &other.0))
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Matrix, b: f64) -> Result<Matrix, MatrixError> {
        self.same_shape(other)?;
        Ok(Matrix(&self.0 * a + &other.0 * b))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        if self.cols() != other.rows() {
            return Err(MatrixError::DimensionMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix(&self.0 * &other.0))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64, MatrixError> {
        self.same_shape(other)?;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs())))
    }

    fn same_shape(&self, other: &Matrix) -> Result<(), MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::DimensionMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

fn check_shape(rows: usize, cols: usize) -> Result<(), MatrixError> {
    if rows == 0 || cols == 0 {
        return Err(MatrixError::EmptyShape { rows, cols });
    }
    Ok(())
}

/// Frobenius inner product `tr(aᵀ b)`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64, MatrixError> {
    a.same_shape(b)?;
    Ok(a.0.dot(&b.0))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.0.norm()
}

/// All `min(m, n)` singular values in nonincreasing order, untruncated.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = a.0.clone().singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> f64 {
    singular_values(a).iter().sum()
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

/// Reduced SVD `B = U diag(S) Vᵀ` keeping only the singular values above
/// `rank_tol * s_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: Matrix,
    singular_values: Vec<f64>,
    v: Matrix,
    rank_tol: f64,
}

impl SvdFactors {
    /// `m x r`, orthonormal columns.
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    /// Strictly positive, nonincreasing.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// `n x r`, orthonormal columns.
    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.iter().sum()
    }

    /// `U Vᵀ`.
    pub fn polar(&self) -> Matrix {
        Matrix(&self.u.0 * self.v.0.transpose())
    }

    pub fn reconstruct(&self) -> Matrix {
        let s =
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.singular_values));
        Matrix(&self.u.0 * s * self.v.0.transpose())
    }
}

pub fn svd_reduced(b: &Matrix, rank_tol: f64) -> Result<SvdFactors, MatrixError> {
    if !(0.0..1.0).contains(&rank_tol) {
        return Err(MatrixError::InvalidRankTol(rank_tol));
    }
    let svd = nalgebra::linalg::SVD::new(b.0.clone(), true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => unreachable!("SVD requested with both factors"),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let s_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let s = svd.singular_values[i];
            s > 0.0 && s > rank_tol * s_max
        })
        .collect();
    if kept.is_empty() {
        return Err(MatrixError::RankZero { rank_tol });
    }

    let r = kept.len();
    let mut uu = DMatrix::zeros(b.rows(), r);
    let mut vv = DMatrix::zeros(b.cols(), r);
    let mut s = Vec::with_capacity(r);
    for (k, &i) in kept.iter().enumerate() {
        uu.set_column(k, &u.column(i));
        vv.set_column(k, &v_t.row(i).transpose());
        s.push(svd.singular_values[i]);
    }
    Ok(SvdFactors {
        u: Matrix(uu),
        singular_values: s,
        v: Matrix(vv),
        rank_tol,
    })
}

/// Polar factor `U Vᵀ` of the truncated reduced SVD.
///
/// For full-rank `b` this is the closest matrix with orthonormal columns
/// (or rows, when `b` is wide) in Frobenius norm. For rank-deficient `b`
/// the discarded directions are left at zero rather than completed to a
/// full semi-orthogonal matrix.
pub fn polar_factor(b: &Matrix, rank_tol: f64) -> Result<Matrix, MatrixError> {
    Ok(svd_reduced(b, rank_tol)?.polar())
}

/// Odd-polynomial iteration `X <- a X + b (X Xᵀ) X + c (X Xᵀ)² X` that
/// approximates the polar factor without an SVD.
///
/// Each iteration has its own `(a, b, c)` triple. The input is divided by
/// its Frobenius norm first, so all singular values start in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSchulz {
    coeffs: Vec<[f64; 3]>,
}

impl NewtonSchulz {
    /// Five-step quintic schedule fitted for singular values in `[0.01, 1]`
    /// after Frobenius scaling: each step is the minimax odd quintic for the
    /// image of the previous one, and the last step is constrained to stay
    /// at or below one. Worst-case singular-value error on that interval is
    /// about `2.5e-6`.
    pub const TUNED_5: [[f64; 3]; 5] = [
        [8.093368577753319, -23.62043050189382, 17.446151858697082],
        [3.636585551257765, -2.72192672225079, 0.5365462786219342],
        [2.6613000151659016, -1.9771545754768052, 0.4526164207044845],
        [1.9561716946406558, -1.337507846825784, 0.3838527426773753],
        [1.8750843899966099, -1.2500237517432449, 0.3749382136572901],
    ];

    /// Classic cubic step `(1.5, -0.5, 0)`.
    pub const CUBIC: [f64; 3] = [1.5, -0.5, 0.0];

    pub fn new(coeffs: Vec<[f64; 3]>) -> Result<Self, MatrixError> {
        if coeffs.is_empty() {
            return Err(MatrixError::EmptySchedule);
        }
        Ok(NewtonSchulz { coeffs })
    }

    /// `iters` repetitions of the cubic step.
    pub fn cubic(iters: usize) -> Result<Self, MatrixError> {
        Self::new(vec![Self::CUBIC; iters])
    }

    pub fn tuned() -> Self {
        NewtonSchulz {
            coeffs: Self::TUNED_5.to_vec(),
        }
    }

    pub fn iterations(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    pub fn orthogonalize(&self, b: &Matrix) -> Result<Matrix, MatrixError> {
        let norm = frobenius_norm(b);
        if norm == 0.0 {
            return Err(MatrixError::RankZero { rank_tol: 0.0 });
        }
        // Iterate on the tall orientation so the Gram matrix is the small one.
        let wide = b.rows() < b.cols();
        let mut x = if wide { b.0.transpose() } else { b.0.clone() } / norm;
        for (k, &[a, bb, c]) in self.coeffs.iter().enumerate() {
            let gram = x.transpose() * &x;
            let poly = &gram * bb + &gram * &gram * c;
            x = &x * a + &x * poly;
            let n = x.norm();
            if !n.is_finite() || n > NS_DIVERGENCE_NORM {
                return Err(MatrixError::NumericalDivergence {
                    iteration: k + 1,
                    norm: n,
                });
            }
        }
        Ok(Matrix(if wide { x.transpose() } else { x }))
    }
}

impl Default for NewtonSchulz {
    fn default() -> Self {
        Self::tuned()
    }
}

pub fn newton_schulz_orthogonalize(b: &Matrix, coeffs: &[[f64; 3]]) -> Result<Matrix, MatrixError> {
    NewtonSchulz::new(coeffs.to_vec())?.orthogonalize(b)
}

/// Haar-distributed `m x n` matrix with orthonormal columns.
pub fn random_semi_orthogonal(m: usize, n: usize, seed: u64) -> Result<Matrix, MatrixError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_semi_orthogonal_with(m, n, &mut rng)
}

/// As [`random_semi_orthogonal`], drawing from a caller-owned generator.
pub fn random_semi_orthogonal_with<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Matrix, MatrixError> {
    check_shape(m, n)?;
    if m < n {
        return Err(MatrixError::WideShape { rows: m, cols: n });
    }
    let g = Matrix::random_gaussian(m, n, rng);
    let qr = g.0.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Sign correction makes QR of a Gaussian matrix Haar distributed.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(Matrix(q))
}
