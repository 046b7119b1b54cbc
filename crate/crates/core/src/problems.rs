//! Synthetic stochastic objectives with exact gradients, seeded stochastic
//! gradients and certified constants.
//!
//! Each [`ProblemSpec`] declares the constants the convergence bounds are
//! stated in terms of:
//!
//! * `lipschitz_fro`: `‖∇f(X) − ∇f(Y)‖_F ≤ L ‖X − Y‖_F`
//! * `lipschitz_dual`: `‖∇f(X) − ∇f(Y)‖_* ≤ L ‖X − Y‖₂`
//! * `f_star`: a lower bound on `f` (exact where the minimizer is known)
//! * `sigma_sq_fro`, `sigma_sq_nuc`: single-sample gradient variance bounds
//!
//! The constants are derived analytically from the problem data and can be
//! spot-checked with [`ProblemSpec::certify_constants`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{
    frobenius_inner, frobenius_norm, nuclear_norm, random_semi_orthogonal_with, spectral_norm,
    Matrix, MatrixError,
};

/// Relative slack allowed when comparing observed ratios to declared constants.
const CERT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("shape {actual:?} does not match problem shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("certification of {constant} failed: declared {declared:e}, observed {observed:e}")]
    CertificationFailed {
        constant: &'static str,
        declared: f64,
        observed: f64,
    },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    NoisyQuadratic,
    LeastSquares,
    LogisticMatrix,
}

/// Source of gradient noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Exact gradients.
    None,
    /// Exact gradient plus i.i.d. Gaussian entries (quadratic only).
    GaussianAdditive,
    /// Per-sample gradients drawn uniformly with replacement from the data.
    DataSampling,
}

#[derive(Debug, Clone, PartialEq)]
enum Objective {
    /// `½ ‖diag(a) (X − X*)‖_F²`.
    /// `noise_var` is the true single-sample `E‖noise‖_F²`.
    Quadratic {
        diag: Vec<f64>,
        x_star: Matrix,
        noise_var: f64,
    },
    /// `(1/2N) ‖A X − Y‖_F²` with rows `a_i` of `A`.
    LeastSquares {
        data: DMatrix<f64>,
        targets: DMatrix<f64>,
        x_star: Matrix,
    },
    /// `(1/N) Σ log(1 + exp(−y_i ⟨A_i, X⟩)) + (λ/2) ‖X‖_F²`.
    Logistic {
        features: Vec<Matrix>,
        labels: Vec<f64>,
        ridge: f64,
        x_star: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    kind: ProblemKind,
    shape: (usize, usize),
    objective: Objective,
    pub lipschitz_fro: f64,
    pub lipschitz_dual: f64,
    pub f_star: f64,
    pub sigma_sq_fro: f64,
    pub sigma_sq_nuc: f64,
    pub noise_model: NoiseModel,
    pub seed_base: u64,
    /// Radius around the minimizer inside which the variance bounds hold
    /// (infinite when they hold globally).
    pub variance_radius: f64,
}

/// Largest observed ratios from [`ProblemSpec::certify_constants`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub trials: usize,
    pub max_ratio_fro: f64,
    pub max_ratio_dual: f64,
    pub variance_fro: f64,
    pub variance_nuc: f64,
    pub min_f: f64,
}

fn eigenvalues_desc(sym: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Sum of the `k` largest eigenvalues of a PSD matrix.
fn ky_fan(ev_desc: &[f64], k: usize) -> f64 {
    ev_desc.iter().take(k).map(|v| v.max(0.0)).sum()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProblemSpec {
    /// `f(X) = ½ ‖diag(spectrum) (X − X*)‖_F²` on `spectrum.len() x cols`
    /// matrices, with `X*` drawn from `seed_base`.
    ///
    /// Gaussian noise is scaled so one sample has `E‖noise‖_F² = sigma²`.
    pub fn noisy_quadratic(
        spectrum: &[f64],
        cols: usize,
        sigma: f64,
        noise_model: NoiseModel,
        seed_base: u64,
    ) -> Result<Self, ProblemError> {
        if spectrum.is_empty() || cols == 0 {
            return Err(ProblemError::Invalid(
                "quadratic needs rows >= 1 and cols >= 1".into(),
            ));
        }
        if spectrum.iter().any(|a| !a.is_finite()) {
            return Err(ProblemError::Invalid(
                "spectrum entries must be finite".into(),
            ));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(ProblemError::Invalid(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        if noise_model == NoiseModel::DataSampling {
            return Err(ProblemError::Invalid(
                "the quadratic has no data to sample; use gaussian_additive or none".into(),
            ));
        }
        let rows = spectrum.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        let x_star = Matrix::random_gaussian(rows, cols, &mut rng);
        let mut curv: Vec<f64> = spectrum.iter().map(|a| a * a).collect();
        curv.sort_by(|a, b| b.total_cmp(a));
        let sigma_sq = if noise_model == NoiseModel::None {
            0.0
        } else {
            sigma * sigma
        };
        let n = rows.min(cols);
        Ok(ProblemSpec {
            kind: ProblemKind::NoisyQuadratic,
            shape: (rows, cols),
            objective: Objective::Quadratic {
                diag: spectrum.to_vec(),
                x_star,
                noise_var: sigma_sq,
            },
            lipschitz_fro: curv[0],
            lipschitz_dual: ky_fan(&curv, n),
            f_star: 0.0,
            sigma_sq_fro: sigma_sq,
            sigma_sq_nuc: n as f64 * sigma_sq,
            noise_model,
            seed_base,
            variance_radius: f64::INFINITY,
        })
    }

    /// Linear regression `f(X) = (1/2N) Σ ‖Xᵀ a_i − y_i‖²` with Gaussian
    /// features and targets `y_i = W_trueᵀ a_i + noise`.
    ///
    /// Per-sample variance grows with the distance to `X*`, so the declared
    /// variance bounds hold only for `‖X − X*‖_F ≤ variance_radius`.
    pub fn least_squares(
        rows: usize,
        cols: usize,
        samples: usize,
        target_noise: f64,
        variance_radius: f64,
        noise_model: NoiseModel,
        seed_base: u64,
    ) -> Result<Self, ProblemError> {
        if rows == 0 || cols == 0 {
            return Err(ProblemError::Invalid(
                "least squares needs rows, cols >= 1".into(),
            ));
        }
        if samples < rows {
            return Err(ProblemError::Invalid(format!(
                "least squares needs samples >= rows ({rows}), got {samples}"
            )));
        }
        if !(variance_radius.is_finite() && variance_radius > 0.0) {
            return Err(ProblemError::Invalid(
                "variance_radius must be finite and > 0".into(),
            ));
        }
        if !(target_noise.is_finite() && target_noise >= 0.0) {
            return Err(ProblemError::Invalid("target noise must be >= 0".into()));
        }
        if noise_model == NoiseModel::GaussianAdditive {
            return Err(ProblemError::Invalid(
                "least squares noise comes from data sampling; use data_sampling or none".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        let data = DMatrix::from_fn(samples, rows, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w_true = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(samples, cols, |_, _| {
            target_noise * rng.sample::<f64, _>(StandardNormal)
        });
        let targets = &data * &w_true + noise;

        let nf = samples as f64;
        let hessian = data.transpose() * &data / nf;
        let rhs = data.transpose() * &targets / nf;
        let x_star = hessian
            .clone()
            .cholesky()
            .ok_or_else(|| ProblemError::Invalid("data matrix is rank deficient".into()))?
            .solve(&rhs);
        let x_star = Matrix::from_dmatrix(x_star)?;

        let ev = eigenvalues_desc(hessian.clone());
        // ‖g_i − ∇f‖_F ≤ ‖a_i a_iᵀ − H‖₂ ρ + ‖a_i‖ ‖r_i‖, r_i the residual at X*.
        let residuals = &data * x_star.as_dmatrix() - &targets;
        let mut var_bound = 0.0;
        for i in 0..samples {
            let a = data.row(i).transpose();
            let outer = &a * a.transpose() - &hessian;
            let op = eigenvalues_desc(outer)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            let d = a.norm() * residuals.row(i).norm();
            var_bound += (op * variance_radius + d).powi(2);
        }
        var_bound /= nf;

        let mut p = ProblemSpec {
            kind: ProblemKind::LeastSquares,
            shape: (rows, cols),
            objective: Objective::LeastSquares {
                data,
                targets,
                x_star,
            },
            lipschitz_fro: ev[0],
            lipschitz_dual: ky_fan(&ev, rows.min(cols)),
            f_star: 0.0,
            sigma_sq_fro: 0.0,
            sigma_sq_nuc: 0.0,
            noise_model,
            seed_base,
            variance_radius,
        };
        p.f_star = p.objective_value(p.minimizer());
        if noise_model == NoiseModel::DataSampling {
            p.sigma_sq_fro = var_bound;
            p.sigma_sq_nuc = rows.min(cols) as f64 * var_bound;
        }
        Ok(p)
    }

    /// Ridge-regularized logistic regression on matrix features:
    /// `f(X) = (1/N) Σ log(1 + exp(−y_i ⟨A_i, X⟩)) + (λ/2) ‖X‖_F²`.
    ///
    /// `f_star` is a certified lower bound `f(X̂) − ‖∇f(X̂)‖_F² / (2λ)` at the
    /// numerically computed minimizer `X̂`.
    pub fn logistic_matrix(
        rows: usize,
        cols: usize,
        samples: usize,
        ridge: f64,
        noise_model: NoiseModel,
        seed_base: u64,
    ) -> Result<Self, ProblemError> {
        if rows == 0 || cols == 0 || samples == 0 {
            return Err(ProblemError::Invalid(
                "logistic needs rows, cols, samples >= 1".into(),
            ));
        }
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(ProblemError::Invalid(format!(
                "ridge must be > 0, got {ridge}"
            )));
        }
        if noise_model == NoiseModel::GaussianAdditive {
            return Err(ProblemError::Invalid(
                "logistic noise comes from data sampling; use data_sampling or none".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base);
        let w_true = Matrix::random_gaussian(rows, cols, &mut rng);
        let flip = Normal::new(0.0, 0.5).expect("valid normal");
        let scale = 1.0 / ((rows * cols) as f64).sqrt();
        let mut features = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let a = Matrix::random_gaussian(rows, cols, &mut rng).scaled(scale);
            let z = frobenius_inner(&a, &w_true)? + flip.sample(&mut rng);
            labels.push(if z >= 0.0 { 1.0 } else { -1.0 });
            features.push(a);
        }

        let nf = samples as f64;
        let gram = DMatrix::from_fn(samples, samples, |i, j| {
            features[i].as_dmatrix().dot(features[j].as_dmatrix())
        });
        let lam_max = eigenvalues_desc(gram)[0].max(0.0) / nf;
        let lipschitz_fro = 0.25 * lam_max + ridge;
        let lipschitz_dual = features
            .iter()
            .map(|a| nuclear_norm(a).powi(2))
            .sum::<f64>()
            / (4.0 * nf)
            + ridge * rows.min(cols) as f64;
        let second_moment = features
            .iter()
            .map(|a| frobenius_norm(a).powi(2))
            .sum::<f64>()
            / nf;

        let mut p = ProblemSpec {
            kind: ProblemKind::LogisticMatrix,
            shape: (rows, cols),
            objective: Objective::Logistic {
                features,
                labels,
                ridge,
                x_star: Matrix::zeros(rows, cols),
            },
            lipschitz_fro,
            lipschitz_dual,
            f_star: 0.0,
            sigma_sq_fro: 0.0,
            sigma_sq_nuc: 0.0,
            noise_model,
            seed_base,
            variance_radius: f64::INFINITY,
        };

        // Gradient descent with step 1/L on a λ-strongly convex objective.
        let mut x = Matrix::zeros(rows, cols);
        for _ in 0..20_000 {
            let g = p.exact_gradient(&x)?;
            if frobenius_norm(&g) < 1e-12 {
                break;
            }
            x = x.lincomb(1.0, &g, -1.0 / lipschitz_fro)?;
        }
        let g = p.exact_gradient(&x)?;
        p.f_star = p.objective_value(&x) - frobenius_norm(&g).powi(2) / (2.0 * ridge);
        if let Objective::Logistic { x_star, .. } = &mut p.objective {
            *x_star = x;
        }
        if noise_model == NoiseModel::DataSampling {
            // Var ≤ E‖y_i s_i A_i‖_F² ≤ E‖A_i‖_F² since the sigmoid is bounded by 1.
            p.sigma_sq_fro = second_moment;
            p.sigma_sq_nuc = rows.min(cols) as f64 * second_moment;
        }
        Ok(p)
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Column count `n`.
    pub fn cols(&self) -> usize {
        self.shape.1
    }

    /// The (numerically computed, for the logistic kind) minimizer.
    pub fn minimizer(&self) -> &Matrix {
        match &self.objective {
            Objective::Quadratic { x_star, .. }
            | Objective::LeastSquares { x_star, .. }
            | Objective::Logistic { x_star, .. } => x_star,
        }
    }

    fn check(&self, x: &Matrix) -> Result<(), ProblemError> {
        if x.shape() != self.shape {
            return Err(ProblemError::ShapeMismatch {
                expected: self.shape,
                actual: x.shape(),
            });
        }
        Ok(())
    }

    /// `f(X)`. Panics if `x` has the wrong shape.
    pub fn objective_value(&self, x: &Matrix) -> f64 {
        assert_eq!(x.shape(), self.shape, "objective_value: shape mismatch");
        match &self.objective {
            Objective::Quadratic { diag, x_star, .. } => {
                let d = x.as_dmatrix() - x_star.as_dmatrix();
                0.5 * d
                    .row_iter()
                    .zip(diag)
                    .map(|(row, a)| a * a * row.norm_squared())
                    .sum::<f64>()
            }
            Objective::LeastSquares { data, targets, .. } => {
                let r = data * x.as_dmatrix() - targets;
                0.5 * r.norm_squared() / data.nrows() as f64
            }
            Objective::Logistic {
                features,
                labels,
                ridge,
                ..
            } => {
                let loss: f64 = features
                    .iter()
                    .zip(labels)
                    .map(|(a, y)| softplus(-y * a.as_dmatrix().dot(x.as_dmatrix())))
                    .sum();
                loss / features.len() as f64 + 0.5 * ridge * x.as_dmatrix().norm_squared()
            }
        }
    }

    pub fn exact_gradient(&self, x: &Matrix) -> Result<Matrix, ProblemError> {
        self.check(x)?;
        let g = match &self.objective {
            Objective::Quadratic { diag, x_star, .. } => {
                let mut d = x.as_dmatrix() - x_star.as_dmatrix();
                for (i, a) in diag.iter().enumerate() {
                    d.row_mut(i).scale_mut(a * a);
                }
                d
            }
            Objective::LeastSquares { data, targets, .. } => {
                data.transpose() * (data * x.as_dmatrix() - targets) / data.nrows() as f64
            }
            Objective::Logistic {
                features,
                labels,
                ridge,
                ..
            } => {
                let mut g = x.as_dmatrix() * *ridge;
                let nf = features.len() as f64;
                for (a, y) in features.iter().zip(labels) {
                    let z = y * a.as_dmatrix().dot(x.as_dmatrix());
                    g -= a.as_dmatrix() * (y * sigmoid(-z) / nf);
                }
                g
            }
        };
        Ok(Matrix::from_dmatrix(g)?)
    }

    /// Mean of `batch` stochastic gradients at `x`, deterministic in `seed`.
    ///
    /// For Gaussian additive noise the batch mean is drawn directly: its
    /// entries are i.i.d. with variance `σ² / (m n B)`, exactly the law of an
    /// average of `B` independent single-sample draws.
    pub fn stochastic_gradient(
        &self,
        x: &Matrix,
        batch: usize,
        seed: u64,
    ) -> Result<Matrix, ProblemError> {
        if batch == 0 {
            return Err(ProblemError::Invalid("batch must be >= 1".into()));
        }
        let grad = self.exact_gradient(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match (self.noise_model, &self.objective) {
            (NoiseModel::None, _) => Ok(grad),
            (NoiseModel::GaussianAdditive, Objective::Quadratic { noise_var, .. }) => {
                let (m, n) = self.shape;
                let sd = (noise_var / (m * n * batch) as f64).sqrt();
                let noise = Matrix::random_gaussian(m, n, &mut rng).scaled(sd);
                Ok(grad.add(&noise)?)
            }
            (NoiseModel::DataSampling, Objective::LeastSquares { data, targets, .. }) => {
                let mut g = DMatrix::zeros(self.shape.0, self.shape.1);
                for _ in 0..batch {
                    let i = rng.random_range(0..data.nrows());
                    let a = data.row(i).transpose();
                    let r = x.as_dmatrix().transpose() * &a - targets.row(i).transpose();
                    g += a * r.transpose();
                }
                Ok(Matrix::from_dmatrix(g / batch as f64)?)
            }
            (
                NoiseModel::DataSampling,
                Objective::Logistic {
                    features,
                    labels,
                    ridge,
                    ..
                },
            ) => {
                let mut g = x.as_dmatrix() * *ridge;
                for _ in 0..batch {
                    let i = rng.random_range(0..features.len());
                    let (a, y) = (&features[i], labels[i]);
                    let z = y * a.as_dmatrix().dot(x.as_dmatrix());
                    g -= a.as_dmatrix() * (y * sigmoid(-z) / batch as f64);
                }
                Ok(Matrix::from_dmatrix(g)?)
            }
            (NoiseModel::DataSampling, Objective::Quadratic { .. })
            | (NoiseModel::GaussianAdditive, _) => {
                unreachable!("rejected at construction")
            }
        }
    }

    /// `X* + s Z` with `Z` standard normal from `seed` and `s ≥ 0` chosen so
    /// that `f(X_1) − f_star = r_target`.
    pub fn initial_point(&self, seed: u64, r_target: f64) -> Result<Matrix, ProblemError> {
        if !(r_target.is_finite() && r_target >= 0.0) {
            return Err(ProblemError::Invalid(format!(
                "r_target must be >= 0, got {r_target}"
            )));
        }
        let (m, n) = self.shape;
        let x_star = self.minimizer();
        let z = Matrix::random_gaussian(m, n, &mut ChaCha8Rng::seed_from_u64(seed));
        let gap = |s: f64| {
            let x = x_star.lincomb(1.0, &z, s).expect("same shape");
            self.objective_value(&x) - self.f_star
        };
        let s = match self.kind {
            ProblemKind::NoisyQuadratic | ProblemKind::LeastSquares => {
                // Exactly quadratic around X*: gap(s) = gap0 + s² q.
                let base = gap(0.0);
                let q = gap(1.0) - base;
                if q <= 0.0 {
                    return Err(ProblemError::Invalid(
                        "objective is flat along the sampled direction".into(),
                    ));
                }
                ((r_target - base).max(0.0) / q).sqrt()
            }
            ProblemKind::LogisticMatrix => {
                let (mut lo, mut hi) = (0.0, 1.0);
                let mut expand = 0;
                while gap(hi) < r_target {
                    hi *= 2.0;
                    expand += 1;
                    if expand > 200 {
                        return Err(ProblemError::Invalid(format!(
                            "cannot reach suboptimality {r_target} along the sampled direction"
                        )));
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if gap(mid) < r_target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        };
        Ok(x_star.lincomb(1.0, &z, s)?)
    }

    fn random_point<R: Rng>(&self, rng: &mut R, radius: f64) -> Matrix {
        let (m, n) = self.shape;
        let z = Matrix::random_gaussian(m, n, rng);
        let r = radius * rng.random::<f64>();
        self.minimizer()
            .lincomb(1.0, &z, r / frobenius_norm(&z).max(f64::MIN_POSITIVE))
            .expect("same shape")
    }

    /// Spot-checks every declared constant on `trials` random points and
    /// noise draws.
    ///
    /// Lipschitz ratios are probed both on random pairs and by power
    /// iteration on the gradient difference, so an under-declared constant is
    /// caught even when random pairs are far from the worst case. Variance is
    /// accepted when the sample mean is within four standard errors of the
    /// declared bound.
    pub fn certify_constants(
        &self,
        trials: usize,
        seed: u64,
    ) -> Result<CertificateReport, ProblemError> {
        if trials < 100 {
            return Err(ProblemError::Invalid(format!(
                "certification needs >= 100 trials, got {trials}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = self.shape;
        let radius = if self.variance_radius.is_finite() {
            self.variance_radius
        } else {
            2.0 * frobenius_norm(self.minimizer()).max(1.0)
        };

        let mut max_fro = 0.0_f64;
        let mut max_dual = 0.0_f64;
        let mut min_f = f64::INFINITY;
        let slack = |l: f64| CERT_SLACK * l.abs().max(1.0);

        let record = |x: &Matrix,
                      y: &Matrix,
                      max_fro: &mut f64,
                      max_dual: &mut f64|
         -> Result<Matrix, ProblemError> {
            let gx = self.exact_gradient(x)?;
            let gy = self.exact_gradient(y)?;
            let dg = gx.sub(&gy)?;
            let dx = x.sub(y)?;
            let fro = frobenius_norm(&dx);
            if fro > 0.0 {
                *max_fro = max_fro.max(frobenius_norm(&dg) / fro);
                *max_dual = max_dual.max(nuclear_norm(&dg) / spectral_norm(&dx));
            }
            let (fx, fy) = (self.objective_value(x), self.objective_value(y));
            let lin = frobenius_inner(&gx, &y.sub(x)?)?;
            let fro_bound = fx + lin + 0.5 * self.lipschitz_fro * fro * fro;
            if fy > fro_bound + slack(fro_bound) {
                return Err(ProblemError::CertificationFailed {
                    constant: "lipschitz_fro (descent lemma)",
                    declared: self.lipschitz_fro,
                    observed: 2.0 * (fy - fx - lin) / (fro * fro),
                });
            }
            let spec = spectral_norm(&dx);
            let dual_bound = fx + lin + 0.5 * self.lipschitz_dual * spec * spec;
            if fy > dual_bound + slack(dual_bound) {
                return Err(ProblemError::CertificationFailed {
                    constant: "lipschitz_dual (descent lemma)",
                    declared: self.lipschitz_dual,
                    observed: 2.0 * (fy - fx - lin) / (spec * spec),
                });
            }
            Ok(dg)
        };

        for _ in 0..trials {
            let x = self.random_point(&mut rng, radius);
            let y = self.random_point(&mut rng, radius);
            min_f = min_f.min(self.objective_value(&x));
            record(&x, &y, &mut max_fro, &mut max_dual)?;
        }

        // Power iteration on D -> ∇f(X + hD) − ∇f(X) for the Frobenius ratio,
        // and semi-orthogonal probes for the dual ratio.
        for probe in 0..4 {
            let x = self.random_point(&mut rng, radius);
            let h = 1e-3 * radius.max(1.0);
            let mut d = Matrix::random_gaussian(m, n, &mut rng);
            for _ in 0..50 {
                d = d.scaled(h / frobenius_norm(&d).max(f64::MIN_POSITIVE));
                let y = x.add(&d)?;
                let dg = record(&y, &x, &mut max_fro, &mut max_dual)?;
                if frobenius_norm(&dg) == 0.0 {
                    break;
                }
                d = dg;
            }
            if m >= n {
                let q = random_semi_orthogonal_with(m, n, &mut rng)?;
                let y = x.lincomb(1.0, &q, h * (probe + 1) as f64)?;
                record(&y, &x, &mut max_fro, &mut max_dual)?;
            }
        }

        if max_fro > self.lipschitz_fro + slack(self.lipschitz_fro) {
            return Err(ProblemError::CertificationFailed {
                constant: "lipschitz_fro",
                declared: self.lipschitz_fro,
                observed: max_fro,
            });
        }
        if max_dual > self.lipschitz_dual + slack(self.lipschitz_dual) {
            return Err(ProblemError::CertificationFailed {
                constant: "lipschitz_dual",
                declared: self.lipschitz_dual,
                observed: max_dual,
            });
        }
        if min_f < self.f_star - slack(self.f_star) {
            return Err(ProblemError::CertificationFailed {
                constant: "f_star",
                declared: self.f_star,
                observed: min_f,
            });
        }

        let mut fro_sq = Vec::with_capacity(trials);
        let mut nuc_sq = Vec::with_capacity(trials);
        let x = self.random_point(&mut rng, radius);
        let grad = self.exact_gradient(&x)?;
        for _ in 0..trials {
            let g = self.stochastic_gradient(&x, 1, rng.random())?;
            let e = g.sub(&grad)?;
            fro_sq.push(frobenius_norm(&e).powi(2));
            nuc_sq.push(nuclear_norm(&e).powi(2));
        }
        let (variance_fro, se_fro) = mean_and_se(&fro_sq);
        let (variance_nuc, se_nuc) = mean_and_se(&nuc_sq);
        if variance_fro > self.sigma_sq_fro + 4.0 * se_fro + slack(self.sigma_sq_fro) {
            return Err(ProblemError::CertificationFailed {
                constant: "sigma_sq_fro",
                declared: self.sigma_sq_fro,
                observed: variance_fro,
            });
        }
        if variance_nuc > self.sigma_sq_nuc + 4.0 * se_nuc + slack(self.sigma_sq_nuc) {
            return Err(ProblemError::CertificationFailed {
                constant: "sigma_sq_nuc",
                declared: self.sigma_sq_nuc,
                observed: variance_nuc,
            });
        }

        Ok(CertificateReport {
            trials,
            max_ratio_fro: max_fro,
            max_ratio_dual: max_dual,
            variance_fro,
            variance_nuc,
            min_f,
        })
    }
}

pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
