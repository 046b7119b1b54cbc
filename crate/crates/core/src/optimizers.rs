//! Heavy-ball Muon, momentum-sum Muon and spectral steepest descent.
//!
//! All three rules keep a momentum matrix `B_t` of the parameter's shape and
//! step along its polar factor:
//!
//! ```text
//! heavy-ball Muon:   B_t = β B_{t-1} + (1-β) G_t      X_{t+1} = X_t - η_t U Vᵀ
//! momentum-sum Muon: B_t = μ B_{t-1} + G_t            X_{t+1} = X_t - η_t U Vᵀ
//! spectral descent:  B_t = β B_{t-1} + (1-β) G_t      X_{t+1} = X_t - η_t ‖B_t‖_* U Vᵀ
//! ```
//!
//! with `B_t = U S Vᵀ` the reduced SVD. The spectral-descent step is the
//! closed-form minimizer of `⟨B_t, Δ⟩ + ‖Δ‖₂² / (2η)` under the spectral norm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{
    frobenius_inner, frobenius_norm, nuclear_norm, svd_reduced, Matrix, MatrixError, NewtonSchulz,
    DEFAULT_RANK_TOL,
};
use crate::problems::{ProblemError, ProblemSpec};
use crate::verifier::StepTrace;

/// Objective value beyond which a run is aborted as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("{op} cannot drive update rule {rule:?}")]
    WrongRule { rule: UpdateRule, op: &'static str },
    #[error("parameter shape {expected:?} does not match gradient shape {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("step-size sequence exhausted at step {0}")]
    ScheduleExhausted(usize),
    #[error("objective {value:e} exceeded the divergence threshold at step {step}")]
    Diverged { step: usize, value: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    MuonHeavyBall,
    MuonSum,
    SpectralDescent,
}

impl UpdateRule {
    pub fn is_muon(self) -> bool {
        matches!(self, UpdateRule::MuonHeavyBall | UpdateRule::MuonSum)
    }
}

/// Step size `η_t`, constant or given per step (1-based).
#[derive(Debug, Clone, PartialEq)]
pub enum StepSize {
    Constant(f64),
    Sequence(Vec<f64>),
}

impl StepSize {
    pub fn at(&self, t: usize) -> Option<f64> {
        match self {
            StepSize::Constant(eta) => Some(*eta),
            StepSize::Sequence(etas) => t.checked_sub(1).and_then(|i| etas.get(i)).copied(),
        }
    }

    fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |eta: f64| !(eta.is_finite() && eta > 0.0);
        match self {
            StepSize::Constant(eta) if bad(*eta) => Err(OptimizerError::InvalidConfig(format!(
                "eta must be finite and > 0, got {eta}"
            ))),
            StepSize::Sequence(etas) if etas.is_empty() => Err(OptimizerError::InvalidConfig(
                "eta sequence is empty".into(),
            )),
            StepSize::Sequence(etas) => match etas.iter().position(|&e| bad(e)) {
                Some(i) => Err(OptimizerError::InvalidConfig(format!(
                    "eta[{}] must be finite and > 0, got {}",
                    i + 1,
                    etas[i]
                ))),
                None => Ok(()),
            },
            StepSize::Constant(_) => Ok(()),
        }
    }
}

/// How the direction `U Vᵀ` is obtained from the momentum.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Orthogonalizer {
    #[default]
    ExactPolar,
    NewtonSchulz(NewtonSchulz),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    /// β for heavy-ball and spectral descent, μ for the momentum sum.
    pub beta: f64,
    pub eta: StepSize,
    pub batch_size: usize,
    pub rank_tol: f64,
    /// Seed the momentum with the first gradient (`B_1 = G_1`) instead of
    /// damping it against a zero buffer.
    pub init_first_full: bool,
    pub orthogonalizer: Orthogonalizer,
}

impl OptimizerConfig {
    pub fn new(rule: UpdateRule, beta: f64, eta: StepSize) -> Self {
        OptimizerConfig {
            rule,
            beta,
            eta,
            batch_size: 1,
            rank_tol: DEFAULT_RANK_TOL,
            init_first_full: true,
            orthogonalizer: Orthogonalizer::ExactPolar,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_rank_tol(mut self, rank_tol: f64) -> Self {
        self.rank_tol = rank_tol;
        self
    }

    pub fn with_init_first_full(mut self, on: bool) -> Self {
        self.init_first_full = on;
        self
    }

    pub fn with_orthogonalizer(mut self, orthogonalizer: Orthogonalizer) -> Self {
        self.orthogonalizer = orthogonalizer;
        self
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.beta.is_finite() && (0.0..1.0).contains(&self.beta)) {
            return Err(OptimizerError::InvalidConfig(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        self.eta.validate()?;
        if self.batch_size == 0 {
            return Err(OptimizerError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rank_tol) {
            return Err(OptimizerError::InvalidConfig(format!(
                "rank_tol must lie in [0, 1), got {}",
                self.rank_tol
            )));
        }
        Ok(())
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub new_x: Matrix,
    /// `O_t` for Muon, `Δ_t` for spectral descent; zero when skipped.
    pub direction: Matrix,
    pub momentum_after: Matrix,
    pub rank: usize,
    pub nuclear_norm_momentum: f64,
    pub eta: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    momentum: Matrix,
    primed: bool,
    step_count: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shape: (usize, usize)) -> Result<Self, OptimizerError> {
        config.validate()?;
        if shape.0 == 0 || shape.1 == 0 {
            return Err(OptimizerError::InvalidConfig(format!(
                "parameter shape must be at least 1x1, got {}x{}",
                shape.0, shape.1
            )));
        }
        Ok(OptimizerState {
            config,
            momentum: Matrix::zeros(shape.0, shape.1),
            primed: false,
            step_count: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn rule(&self) -> UpdateRule {
        self.config.rule
    }

    pub fn momentum(&self) -> &Matrix {
        &self.momentum
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn shape(&self) -> (usize, usize) {
        self.momentum.shape()
    }

    /// Folds `g` into the momentum buffer and returns the new buffer.
    pub fn accumulate_momentum(&mut self, g: &Matrix) -> Result<&Matrix, OptimizerError> {
        self.check_shape(g)?;
        let beta = self.config.beta;
        self.momentum = match self.config.rule {
            UpdateRule::MuonSum => self.momentum.lincomb(beta, g, 1.0)?,
            _ if !self.primed && self.config.init_first_full => g.clone(),
            _ => self.momentum.lincomb(beta, g, 1.0 - beta)?,
        };
        self.primed = true;
        Ok(&self.momentum)
    }

    /// Dispatches on the configured rule.
    pub fn step(&mut self, x: &Matrix, g: &Matrix) -> Result<StepOutcome, OptimizerError> {
        match self.config.rule {
            UpdateRule::MuonHeavyBall | UpdateRule::MuonSum => self.muon_step(x, g),
            UpdateRule::SpectralDescent => self.spectral_descent_step(x, g),
        }
    }

    pub fn muon_step(&mut self, x: &Matrix, g: &Matrix) -> Result<StepOutcome, OptimizerError> {
        if !self.config.rule.is_muon() {
            return Err(OptimizerError::WrongRule {
                rule: self.config.rule,
                op: "muon_step",
            });
        }
        self.take_step(x, g, |_nuc| -1.0)
    }

    pub fn spectral_descent_step(
        &mut self,
        x: &Matrix,
        g: &Matrix,
    ) -> Result<StepOutcome, OptimizerError> {
        if self.config.rule != UpdateRule::SpectralDescent {
            return Err(OptimizerError::WrongRule {
                rule: self.config.rule,
                op: "spectral_descent_step",
            });
        }
        self.take_step(x, g, |nuc| -nuc)
    }

    /// Shared body: `X_{t+1} = X_t + η_t · scale(‖B_t‖_*) · U Vᵀ`.
    fn take_step(
        &mut self,
        x: &Matrix,
        g: &Matrix,
        scale: impl Fn(f64) -> f64,
    ) -> Result<StepOutcome, OptimizerError> {
        self.check_shape(x)?;
        let t = self.step_count + 1;
        let eta = self
            .config
            .eta
            .at(t)
            .ok_or(OptimizerError::ScheduleExhausted(t))?;
        self.accumulate_momentum(g)?;
        self.step_count = t;

        let factors = match svd_reduced(&self.momentum, self.config.rank_tol) {
            Ok(f) => f,
            Err(MatrixError::RankZero { .. }) => {
                log::debug!("step {t}: momentum has rank zero, skipping update");
                let (m, n) = self.shape();
                return Ok(StepOutcome {
                    new_x: x.clone(),
                    direction: Matrix::zeros(m, n),
                    momentum_after: self.momentum.clone(),
                    rank: 0,
                    nuclear_norm_momentum: 0.0,
                    eta,
                    skipped: true,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let nuc = factors.nuclear_norm();
        let polar = match &self.config.orthogonalizer {
            Orthogonalizer::ExactPolar => factors.polar(),
            Orthogonalizer::NewtonSchulz(ns) => ns.orthogonalize(&self.momentum)?,
        };
        let direction = polar.scaled(eta * scale(nuc));
        Ok(StepOutcome {
            new_x: x.add(&direction)?,
            direction: match self.config.rule {
                UpdateRule::SpectralDescent => direction,
                _ => polar,
            },
            momentum_after: self.momentum.clone(),
            rank: factors.rank(),
            nuclear_norm_momentum: nuc,
            eta,
            skipped: false,
        })
    }

    fn check_shape(&self, m: &Matrix) -> Result<(), OptimizerError> {
        if m.shape() != self.shape() {
            return Err(OptimizerError::ShapeMismatch {
                expected: self.shape(),
                actual: m.shape(),
            });
        }
        Ok(())
    }
}

/// Everything known about one step, handed to [`run_epoch_observed`] observers.
#[derive(Debug)]
pub struct StepView<'a> {
    /// 1-based step index.
    pub t: usize,
    pub x: &'a Matrix,
    pub grad: &'a Matrix,
    pub stochastic_grad: &'a Matrix,
    pub outcome: &'a StepOutcome,
    pub trace: &'a StepTrace,
}

/// A run that stopped early, with the steps completed before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error} (after {} completed steps)", completed.len())]
pub struct EpochError {
    #[source]
    pub error: OptimizerError,
    pub completed: Vec<StepTrace>,
}

/// Derives the noise seed of step `t` from a run seed.
pub fn step_seed(run_seed: u64, t: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(t as u64))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `horizon` steps from `x0`, drawing `batch_size` stochastic gradients
/// per step from `problem`.
pub fn run_epoch(
    state: &mut OptimizerState,
    problem: &ProblemSpec,
    x0: &Matrix,
    horizon: usize,
    seed: u64,
) -> Result<Vec<StepTrace>, OptimizerError> {
    run_epoch_observed(state, problem, x0, horizon, seed, |_| {}).map_err(|e| e.error)
}

/// As [`run_epoch`], calling `observe` after every step.
pub fn run_epoch_observed<F>(
    state: &mut OptimizerState,
    problem: &ProblemSpec,
    x0: &Matrix,
    horizon: usize,
    seed: u64,
    mut observe: F,
) -> Result<Vec<StepTrace>, EpochError>
where
    F: FnMut(&StepView<'_>),
{
    let mut traces = Vec::with_capacity(horizon);
    let fail = |error: OptimizerError, traces: Vec<StepTrace>| EpochError {
        error,
        completed: traces,
    };
    if horizon == 0 {
        return Err(fail(
            OptimizerError::InvalidConfig("horizon must be >= 1".into()),
            traces,
        ));
    }
    if x0.shape() != problem.shape() || x0.shape() != state.shape() {
        return Err(fail(
            OptimizerError::ShapeMismatch {
                expected: problem.shape(),
                actual: x0.shape(),
            },
            traces,
        ));
    }

    let batch = state.config().batch_size;
    let mut x = x0.clone();
    for _ in 0..horizon {
        let t = state.step_count() + 1;
        let f_val = problem.objective_value(&x);
        if f_val.is_nan() || f_val > DIVERGENCE_THRESHOLD {
            return Err(fail(
                OptimizerError::Diverged {
                    step: t,
                    value: f_val,
                },
                traces,
            ));
        }
        let computed = problem
            .exact_gradient(&x)
            .and_then(|grad| {
                let g = problem.stochastic_gradient(&x, batch, step_seed(seed, t))?;
                Ok((grad, g))
            })
            .map_err(OptimizerError::from)
            .and_then(|(grad, g)| Ok((state.step(&x, &g)?, grad, g)));
        let (outcome, grad, g) = match computed {
            Ok(v) => v,
            Err(e) => return Err(fail(e, traces)),
        };

        let mom_err = outcome
            .momentum_after
            .sub(&grad)
            .expect("momentum and gradient share the parameter shape");
        let trace = StepTrace {
            t,
            f_val,
            grad_fro: frobenius_norm(&grad),
            grad_nuc: nuclear_norm(&grad),
            mom_err_fro: frobenius_norm(&mom_err),
            mom_err_nuc: nuclear_norm(&mom_err),
            b_nuc: outcome.nuclear_norm_momentum,
            rank: outcome.rank,
            eta_used: outcome.eta,
            inner_grad_dir: frobenius_inner(&grad, &outcome.direction)
                .expect("direction shares the parameter shape"),
            skipped: outcome.skipped,
        };
        observe(&StepView {
            t,
            x: &x,
            grad: &grad,
            stochastic_grad: &g,
            outcome: &outcome,
            trace: &trace,
        });
        traces.push(trace);
        x = outcome.new_x;
    }
    Ok(traces)
}
