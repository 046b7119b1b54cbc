//! Per-step inequality and identity checks on recorded trajectories, plus
//! seed-averaged reports against the explicit convergence bounds.
//!
//! Every per-step check is deterministic: none of the inequalities involves
//! an expectation, so a single violation at any step of any run (noisy or
//! not) is a hard failure. Bound reports are statements in expectation and
//! are judged against the seed mean with a two-standard-error tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{
    frobenius_inner, frobenius_norm, nuclear_norm, spectral_norm, Matrix, MatrixError,
};
use crate::optimizers::UpdateRule;
use crate::problems::mean_and_se;
use crate::schedules::{ScheduleParams, Theorem};

/// Scale-relative tolerance for the per-step inequalities.
pub const INEQUALITY_TOL: f64 = 1e-9;
/// Relative tolerance for the spectral-descent identities.
pub const IDENTITY_TOL: f64 = 1e-8;
/// Seeds required before a noisy run's expectation is estimated.
pub const MIN_SEEDS_NOISY: usize = 16;
/// Standard errors of slack allowed below zero in a bound report.
pub const BOUND_SE_MULTIPLIER: f64 = 2.0;

/// Quantities measured at one optimizer step `t`, all evaluated at `X_t`
/// with the momentum `B_t` formed at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub f_val: f64,
    /// `‖∇f(X_t)‖_F`.
    pub grad_fro: f64,
    /// `‖∇f(X_t)‖_*`.
    pub grad_nuc: f64,
    /// `‖B_t − ∇f(X_t)‖_F`.
    pub mom_err_fro: f64,
    /// `‖B_t − ∇f(X_t)‖_*`.
    pub mom_err_nuc: f64,
    /// `‖B_t‖_*`.
    pub b_nuc: f64,
    pub rank: usize,
    pub eta_used: f64,
    /// `⟨∇f(X_t), direction⟩` where the direction is `UVᵀ` for Muon and the
    /// full step `Δ_t` for spectral descent.
    pub inner_grad_dir: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("{check} violated at step {t}: lhs {lhs:e} > rhs {rhs:e} (tolerance {tolerance:e})")]
    InequalityViolated {
        check: &'static str,
        t: usize,
        lhs: f64,
        rhs: f64,
        tolerance: f64,
    },
    #[error("{check} violated at step {t}: expected {expected:e}, got {actual:e}")]
    IdentityViolated {
        check: &'static str,
        t: usize,
        expected: f64,
        actual: f64,
    },
    #[error("{check} does not apply: {reason}")]
    NotApplicable { check: &'static str, reason: String },
    #[error("steps {first} and {second} are not consecutive")]
    NonConsecutive { first: usize, second: usize },
    #[error("config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("traces do not match the schedule: {0}")]
    ConfigMismatch(String),
    #[error("need at least {required} seeds, got {found}")]
    InsufficientSeeds { required: usize, found: usize },
    #[error("insufficient horizons for a rate fit: {0}")]
    InsufficientHorizons(String),
    #[error("slope undefined: {0}")]
    DegenerateSlope(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no traces to aggregate")]
    Empty,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Both sides of a checked inequality; `slack = rhs − lhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    pub check: String,
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
}

fn inequality(
    check: &'static str,
    t: usize,
    lhs: f64,
    rhs: f64,
    tolerance: f64,
) -> Result<SlackReport, VerifyError> {
    let slack = rhs - lhs;
    if slack >= -tolerance {
        Ok(SlackReport {
            check: check.to_string(),
            t,
            lhs,
            rhs,
            slack,
            tolerance,
        })
    } else {
        Err(VerifyError::InequalityViolated {
            check,
            t,
            lhs,
            rhs,
            tolerance,
        })
    }
}

fn consecutive(prev: &StepTrace, next: &StepTrace) -> Result<(), VerifyError> {
    if next.t == prev.t + 1 {
        Ok(())
    } else {
        Err(VerifyError::NonConsecutive {
            first: prev.t,
            second: next.t,
        })
    }
}

pub const CHECK_MUON_INNER: &str = "muon_inner_product";
pub const CHECK_LEMMA_DESCENT: &str = "muon_descent";
pub const CHECK_SPECTRAL_IDENTITIES: &str = "spectral_identities";
pub const CHECK_SPECTRAL_DESCENT: &str = "spectral_descent";
pub const CHECK_NORM_EQUIVALENCE: &str = "norm_equivalence";
pub const CHECK_MOMENTUM_RECURSION: &str = "momentum_recursion";

/// `−⟨∇, O⟩ ≤ −¼‖∇‖_F + (5/2)‖∇ − B‖_F` for a Muon direction `O = UVᵀ`.
pub fn check_muon_inner_product(
    t: usize,
    direction: &Matrix,
    grad: &Matrix,
    momentum: &Matrix,
) -> Result<SlackReport, VerifyError> {
    let inner = frobenius_inner(grad, direction)?;
    let err = frobenius_norm(&grad.sub(momentum)?);
    muon_inner_from_parts(t, inner, frobenius_norm(grad), err)
}

fn muon_inner_from_parts(
    t: usize,
    inner: f64,
    grad_fro: f64,
    err_fro: f64,
) -> Result<SlackReport, VerifyError> {
    inequality(
        CHECK_MUON_INNER,
        t,
        -inner,
        -0.25 * grad_fro + 2.5 * err_fro,
        INEQUALITY_TOL * grad_fro.max(1.0),
    )
}

/// The inner-product inequality from a recorded Muon step. `None` for
/// skipped steps.
pub fn check_muon_inner_product_trace(
    step: &StepTrace,
) -> Result<Option<SlackReport>, VerifyError> {
    if step.skipped {
        return Ok(None);
    }
    muon_inner_from_parts(step.t, step.inner_grad_dir, step.grad_fro, step.mom_err_fro).map(Some)
}

/// `f(X_{t+1}) ≤ f(X_t) − (η/4)‖∇‖_F + (5/2)η‖∇ − B‖_F + η²nL/2` across
/// two consecutive Muon steps. `None` when `prev` was skipped.
pub fn check_lemma1_descent(
    prev: &StepTrace,
    next: &StepTrace,
    lipschitz: f64,
    n: usize,
) -> Result<Option<SlackReport>, VerifyError> {
    consecutive(prev, next)?;
    if prev.skipped {
        log::debug!("descent check bypassed at skipped step {}", prev.t);
        return Ok(None);
    }
    let eta = prev.eta_used;
    let rhs = prev.f_val - 0.25 * eta * prev.grad_fro
        + 2.5 * eta * prev.mom_err_fro
        + 0.5 * eta * eta * n as f64 * lipschitz;
    inequality(
        CHECK_LEMMA_DESCENT,
        prev.t,
        next.f_val,
        rhs,
        INEQUALITY_TOL * prev.f_val.abs().max(1.0),
    )
    .map(Some)
}

/// Relative errors of `⟨Δ, B⟩ = −η‖B‖_*²` and `‖Δ‖₂ = η‖B‖_*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub t: usize,
    pub inner_expected: f64,
    pub inner_actual: f64,
    pub norm_expected: f64,
    pub norm_actual: f64,
    pub max_rel_err: f64,
}

fn rel_err(expected: f64, actual: f64) -> f64 {
    let scale = expected.abs().max(f64::MIN_POSITIVE);
    (actual - expected).abs() / scale
}

/// Spectral-descent step identities for `Δ = direction` built from
/// `momentum` with step size `eta`.
pub fn check_spectral_identities(
    t: usize,
    direction: &Matrix,
    momentum: &Matrix,
    eta: f64,
) -> Result<IdentityReport, VerifyError> {
    let b_nuc = nuclear_norm(momentum);
    let inner_expected = -eta * b_nuc * b_nuc;
    let inner_actual = frobenius_inner(direction, momentum)?;
    let norm_expected = eta * b_nuc;
    let norm_actual = spectral_norm(direction);
    let e_inner = rel_err(inner_expected, inner_actual);
    let e_norm = rel_err(norm_expected, norm_actual);
    if e_inner > IDENTITY_TOL {
        return Err(VerifyError::IdentityViolated {
            check: "spectral_inner_identity",
            t,
            expected: inner_expected,
            actual: inner_actual,
        });
    }
    if e_norm > IDENTITY_TOL {
        return Err(VerifyError::IdentityViolated {
            check: "spectral_norm_identity",
            t,
            expected: norm_expected,
            actual: norm_actual,
        });
    }
    Ok(IdentityReport {
        t,
        inner_expected,
        inner_actual,
        norm_expected,
        norm_actual,
        max_rel_err: e_inner.max(e_norm),
    })
}

/// `(η/2 − η²L/2)‖∇‖_*² ≤ 2(f(X_t) − f(X_{t+1})) + (2η − η²L)‖∇ − B‖_*²`
/// across two consecutive spectral-descent steps. Requires `η ≤ 1/L`.
pub fn check_spectral_descent_ineq(
    prev: &StepTrace,
    next: &StepTrace,
    lipschitz_dual: f64,
) -> Result<Option<SlackReport>, VerifyError> {
    consecutive(prev, next)?;
    let eta = prev.eta_used;
    if eta * lipschitz_dual > 1.0 {
        return Err(VerifyError::NotApplicable {
            check: CHECK_SPECTRAL_DESCENT,
            reason: format!("eta {eta} exceeds 1/L = {}", 1.0 / lipschitz_dual),
        });
    }
    if prev.skipped {
        return Ok(None);
    }
    let l = lipschitz_dual;
    let lhs = (0.5 * eta - 0.5 * eta * eta * l) * prev.grad_nuc * prev.grad_nuc;
    let rhs = 2.0 * (prev.f_val - next.f_val)
        + (2.0 * eta - eta * eta * l) * prev.mom_err_nuc * prev.mom_err_nuc;
    inequality(
        CHECK_SPECTRAL_DESCENT,
        prev.t,
        lhs,
        rhs,
        INEQUALITY_TOL * prev.f_val.abs().max(1.0),
    )
    .map(Some)
}

/// Outcome of [`check_norm_equivalence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEquivalenceReport {
    pub samples: usize,
    /// Largest `‖A‖_*² / (n ‖A‖_F²)` seen.
    pub max_ratio: f64,
}

/// `‖A‖_*² ≤ n ‖A‖_F²` with `n` the column count of each sample.
pub fn check_norm_equivalence(samples: &[Matrix]) -> Result<NormEquivalenceReport, VerifyError> {
    let mut max_ratio: f64 = 0.0;
    for (i, a) in samples.iter().enumerate() {
        let fro = frobenius_norm(a);
        if fro == 0.0 {
            continue;
        }
        let nuc = nuclear_norm(a);
        let lhs = nuc * nuc;
        let rhs = a.cols() as f64 * fro * fro;
        inequality(CHECK_NORM_EQUIVALENCE, i, lhs, rhs, 1e-12 * rhs)?;
        max_ratio = max_ratio.max(lhs / rhs);
    }
    Ok(NormEquivalenceReport {
        samples: samples.len(),
        max_ratio,
    })
}

/// `‖δ̂_{t+1}‖_F ≤ β‖δ̂_t‖_F + (1−β)‖δ_{t+1}‖_F + ηL√n` for heavy-ball
/// momentum, where `δ_{t+1} = G_{t+1} − ∇f(X_{t+1})` is the fresh noise that
/// enters `B_{t+1}`.
#[allow(clippy::too_many_arguments)]
pub fn check_momentum_recursion(
    t: usize,
    prev_err: f64,
    next_err: f64,
    next_noise: f64,
    beta: f64,
    eta: f64,
    lipschitz: f64,
    n: usize,
) -> Result<SlackReport, VerifyError> {
    let rhs = beta * prev_err + (1.0 - beta) * next_noise + eta * lipschitz * (n as f64).sqrt();
    inequality(
        CHECK_MOMENTUM_RECURSION,
        t,
        next_err,
        rhs,
        INEQUALITY_TOL * rhs.max(1.0),
    )
}

/// Constants needed to run the per-step checks over a whole trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCheckContext {
    pub rule: UpdateRule,
    pub lipschitz_fro: f64,
    pub lipschitz_dual: f64,
    pub n: usize,
}

/// Tally of one named check over a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub check: String,
    pub checked: usize,
    pub bypassed: usize,
    pub violations: usize,
    pub min_slack: Option<f64>,
    pub first_violation: Option<String>,
}

impl CheckSummary {
    pub fn new(check: &str) -> Self {
        CheckSummary {
            check: check.to_string(),
            checked: 0,
            bypassed: 0,
            violations: 0,
            min_slack: None,
            first_violation: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Folds one check result into the tally.
    pub fn record(&mut self, result: Result<Option<SlackReport>, VerifyError>) {
        match result {
            Ok(Some(r)) => {
                self.checked += 1;
                self.min_slack = Some(self.min_slack.map_or(r.slack, |m| m.min(r.slack)));
            }
            Ok(None) => self.bypassed += 1,
            Err(e) => {
                self.checked += 1;
                self.violations += 1;
                if let VerifyError::InequalityViolated { lhs, rhs, .. } = e {
                    let s = rhs - lhs;
                    self.min_slack = Some(self.min_slack.map_or(s, |m| m.min(s)));
                }
                if self.first_violation.is_none() {
                    self.first_violation = Some(e.to_string());
                }
            }
        }
    }

    /// Combines tallies of the same check from several runs.
    pub fn merge(&mut self, other: &CheckSummary) {
        self.checked += other.checked;
        self.bypassed += other.bypassed;
        self.violations += other.violations;
        self.min_slack = match (self.min_slack, other.min_slack) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if self.first_violation.is_none() {
            self.first_violation.clone_from(&other.first_violation);
        }
    }
}

/// Runs every per-step check that can be evaluated from recorded traces
/// alone. The spectral inequality is skipped (reported as not applicable)
/// when `η > 1/L_dual`.
pub fn verify_trace(traces: &[StepTrace], ctx: &TraceCheckContext) -> Vec<CheckSummary> {
    let mut out = Vec::new();
    match ctx.rule {
        UpdateRule::MuonHeavyBall | UpdateRule::MuonSum => {
            let mut inner = CheckSummary::new(CHECK_MUON_INNER);
            for s in traces {
                inner.record(check_muon_inner_product_trace(s));
            }
            let mut descent = CheckSummary::new(CHECK_LEMMA_DESCENT);
            for w in traces.windows(2) {
                descent.record(check_lemma1_descent(&w[0], &w[1], ctx.lipschitz_fro, ctx.n));
            }
            out.push(inner);
            out.push(descent);
        }
        UpdateRule::SpectralDescent => {
            let mut descent = CheckSummary::new(CHECK_SPECTRAL_DESCENT);
            for w in traces.windows(2) {
                match check_spectral_descent_ineq(&w[0], &w[1], ctx.lipschitz_dual) {
                    Err(VerifyError::NotApplicable { .. }) => descent.bypassed += 1,
                    r => descent.record(r),
                }
            }
            out.push(descent);
        }
    }
    out
}

/// The traces of one seed together with the digest of the config that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub config_digest: String,
    pub traces: Vec<StepTrace>,
}

/// Seed-averaged empirical left side against the explicit right side of a
/// convergence bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: Theorem,
    pub lhs_empirical: f64,
    pub lhs_std_error: f64,
    pub rhs_explicit: f64,
    pub slack: f64,
    pub statistical_tolerance: f64,
    pub holds: bool,
    pub seeds: usize,
    pub horizon: usize,
    pub batch: usize,
    pub config_digest: String,
    /// For the spectral-descent bound: the constant `C` with
    /// `rhs = C (R/T + 2σ²_nuc/B)`.
    pub o_constant: Option<f64>,
}

fn sorted_runs(runs: &[SeedRun]) -> Result<(Vec<&SeedRun>, String, usize), VerifyError> {
    let first = runs.first().ok_or(VerifyError::Empty)?;
    let digest = first.config_digest.clone();
    let horizon = first.traces.len();
    if horizon == 0 {
        return Err(VerifyError::Empty);
    }
    for r in runs {
        if r.config_digest != digest {
            return Err(VerifyError::DigestMismatch {
                expected: digest,
                found: r.config_digest.clone(),
            });
        }
        if r.traces.len() != horizon {
            return Err(VerifyError::ConfigMismatch(format!(
                "seed {} has {} steps, expected {horizon}",
                r.seed,
                r.traces.len()
            )));
        }
    }
    let mut sorted: Vec<&SeedRun> = runs.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    Ok((sorted, digest, horizon))
}

fn eta_matches(runs: &[&SeedRun], eta: f64) -> Result<(), VerifyError> {
    for r in runs {
        for s in &r.traces {
            if (s.eta_used - eta).abs() > 1e-12 * eta.abs() {
                return Err(VerifyError::ConfigMismatch(format!(
                    "seed {} step {} used eta {} but the schedule prescribes {eta}",
                    r.seed, s.t, s.eta_used
                )));
            }
        }
    }
    Ok(())
}

fn seed_mean<F: Fn(&StepTrace) -> f64>(runs: &[&SeedRun], f: F) -> (f64, f64) {
    let per_seed: Vec<f64> = runs
        .iter()
        .map(|r| r.traces.iter().map(&f).sum::<f64>() / r.traces.len() as f64)
        .collect();
    mean_and_se(&per_seed)
}

/// Explicit right side of the heavy-ball Muon bound, divided by `T`:
///
/// ```text
/// (4R/η + 10σ/((1−β)√B) + 10T√(1−β)σ/√B + 10TηL/(1−β) + 2ηnLT) / T
/// ```
#[allow(clippy::too_many_arguments)]
pub fn thm22_rhs(
    r: f64,
    lipschitz: f64,
    sigma: f64,
    n: usize,
    horizon: usize,
    beta: f64,
    eta: f64,
    batch: usize,
) -> f64 {
    let t = horizon as f64;
    let sb = (batch as f64).sqrt();
    let a = 1.0 - beta;
    let total = 4.0 * r / eta
        + 10.0 * sigma / (a * sb)
        + 10.0 * t * a.sqrt() * sigma / sb
        + 10.0 * t * eta * lipschitz / a
        + 2.0 * eta * n as f64 * lipschitz * t;
    total / t
}

/// Compares the seed mean of `(1/T) Σ ‖∇f(X_t)‖_F` with [`thm22_rhs`].
///
/// Refuses traces from different configs, traces whose step size differs
/// from the schedule's, and noisy runs with fewer than
/// [`MIN_SEEDS_NOISY`] seeds.
pub fn build_bound_report_thm22(
    runs: &[SeedRun],
    schedule: &ScheduleParams,
    r: f64,
    lipschitz: f64,
    sigma: f64,
    n: usize,
) -> Result<BoundReport, VerifyError> {
    if !schedule.theorem.is_thm22() {
        return Err(VerifyError::InvalidSchedule(format!(
            "{} is not a heavy-ball Muon schedule",
            schedule.theorem.name()
        )));
    }
    let (sorted, digest, horizon) = sorted_runs(runs)?;
    if sigma > 0.0 && sorted.len() < MIN_SEEDS_NOISY {
        return Err(VerifyError::InsufficientSeeds {
            required: MIN_SEEDS_NOISY,
            found: sorted.len(),
        });
    }
    eta_matches(&sorted, schedule.eta)?;
    let (lhs, se) = seed_mean(&sorted, |s| s.grad_fro);
    let rhs = thm22_rhs(
        r,
        lipschitz,
        sigma,
        n,
        horizon,
        schedule.beta,
        schedule.eta,
        schedule.batch,
    );
    Ok(finish(
        schedule.theorem,
        lhs,
        se,
        rhs,
        sorted.len(),
        horizon,
        schedule.batch,
        digest,
        None,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    theorem: Theorem,
    lhs: f64,
    se: f64,
    rhs: f64,
    seeds: usize,
    horizon: usize,
    batch: usize,
    config_digest: String,
    o_constant: Option<f64>,
) -> BoundReport {
    let tol = BOUND_SE_MULTIPLIER * se;
    let slack = rhs - lhs;
    BoundReport {
        theorem,
        lhs_empirical: lhs,
        lhs_std_error: se,
        rhs_explicit: rhs,
        slack,
        statistical_tolerance: tol,
        holds: slack >= -tol,
        seeds,
        horizon,
        batch,
        config_digest,
        o_constant,
    }
}

/// Explicit right side of the spectral-descent bound for `(1/T) Σ ‖∇f‖_*²`,
/// with `sigma_sq_nuc` bounding the single-sample `E‖G − ∇f‖_*²`.
///
/// With `γ = 1/(2β) − 1`:
///
/// ```text
/// k = η/2 − η²L/2          q = 2η − η²L
/// K = 2(1 + 1/γ) β L² η²   D = 1 − (1+γ)β − K
/// (1/T) Σ ‖∇f‖_*² ≤ [2R + (1−β) (q/D) σ²_nuc T / B] / ((k − qK/D) T)
/// ```
///
/// Returns `None` when `β ≥ 1/2` or the leading coefficient is not positive.
pub fn thm31_rhs(
    r: f64,
    lipschitz_dual: f64,
    sigma_sq_nuc: f64,
    horizon: usize,
    beta: f64,
    eta: f64,
    batch: usize,
) -> Option<f64> {
    if !(beta > 0.0 && beta < 0.5) {
        return None;
    }
    let l = lipschitz_dual;
    let gamma = 1.0 / (2.0 * beta) - 1.0;
    let k = 0.5 * eta - 0.5 * eta * eta * l;
    let q = 2.0 * eta - eta * eta * l;
    let big_k = 2.0 * (1.0 + 1.0 / gamma) * beta * l * l * eta * eta;
    let d = 1.0 - (1.0 + gamma) * beta - big_k;
    if d <= 0.0 {
        return None;
    }
    let coef = k - q * big_k / d;
    if coef <= 0.0 {
        return None;
    }
    let t = horizon as f64;
    let total = 2.0 * r + (1.0 - beta) * (q / d) * sigma_sq_nuc * t / batch as f64;
    Some(total / (coef * t))
}

/// Compares the seed mean of `(1/T) Σ ‖∇f(X_t)‖_*²` with [`thm31_rhs`] at
/// the step size the traces used, which must not exceed the schedule's cap.
pub fn build_bound_report_thm31(
    runs: &[SeedRun],
    schedule: &ScheduleParams,
    r: f64,
    lipschitz_dual: f64,
    sigma_sq_nuc: f64,
    batch: usize,
) -> Result<BoundReport, VerifyError> {
    if schedule.theorem != Theorem::Thm31 {
        return Err(VerifyError::InvalidSchedule(format!(
            "{} is not a spectral-descent schedule",
            schedule.theorem.name()
        )));
    }
    if !schedule.valid {
        return Err(VerifyError::InvalidSchedule(schedule.reason.clone()));
    }
    let (sorted, digest, horizon) = sorted_runs(runs)?;
    if sigma_sq_nuc > 0.0 && sorted.len() < MIN_SEEDS_NOISY {
        return Err(VerifyError::InsufficientSeeds {
            required: MIN_SEEDS_NOISY,
            found: sorted.len(),
        });
    }
    let eta = sorted[0].traces[0].eta_used;
    if eta > schedule.eta * (1.0 + 1e-12) {
        return Err(VerifyError::ConfigMismatch(format!(
            "eta {eta} exceeds the cap {}",
            schedule.eta
        )));
    }
    eta_matches(&sorted, eta)?;
    let rhs = thm31_rhs(
        r,
        lipschitz_dual,
        sigma_sq_nuc,
        horizon,
        schedule.beta,
        eta,
        batch,
    )
    .ok_or_else(|| {
        VerifyError::InvalidSchedule(format!(
            "bound coefficient is not positive for beta {} and eta {eta}",
            schedule.beta
        ))
    })?;
    let (lhs, se) = seed_mean(&sorted, |s| s.grad_nuc * s.grad_nuc);
    let simple = r / horizon as f64 + 2.0 * sigma_sq_nuc / batch as f64;
    Ok(finish(
        Theorem::Thm31,
        lhs,
        se,
        rhs,
        sorted.len(),
        horizon,
        batch,
        digest,
        Some(rhs / simple),
    ))
}

/// Seed-averaged gradient norm at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub horizon: usize,
    pub mean: f64,
    pub std_error: f64,
    pub seeds: usize,
}

impl HorizonPoint {
    /// Seed mean and standard error of `(1/T) Σ ‖∇f(X_t)‖_F`.
    pub fn from_runs(runs: &[Vec<StepTrace>]) -> Result<Self, VerifyError> {
        let horizon = runs.first().map(Vec::len).ok_or(VerifyError::Empty)?;
        if horizon == 0 || runs.iter().any(|r| r.len() != horizon) {
            return Err(VerifyError::ConfigMismatch(
                "all runs at one horizon must have the same length".into(),
            ));
        }
        let per: Vec<f64> = runs
            .iter()
            .map(|r| r.iter().map(|s| s.grad_fro).sum::<f64>() / horizon as f64)
            .collect();
        let (mean, std_error) = mean_and_se(&per);
        Ok(HorizonPoint {
            horizon,
            mean,
            std_error,
            seeds: runs.len(),
        })
    }
}

/// Least-squares slope of `log(mean)` against `log(T)`.
///
/// Needs at least three distinct horizons spanning two decades and strictly
/// positive means.
pub fn rate_slope(points: &[HorizonPoint]) -> Result<f64, VerifyError> {
    let mut hs: Vec<usize> = points.iter().map(|p| p.horizon).collect();
    hs.sort_unstable();
    hs.dedup();
    if hs.len() < 3 {
        return Err(VerifyError::InsufficientHorizons(format!(
            "{} distinct horizons, need at least 3",
            hs.len()
        )));
    }
    let (lo, hi) = (hs[0], hs[hs.len() - 1]);
    if (hi as f64) < 100.0 * lo as f64 * (1.0 - 1e-12) {
        return Err(VerifyError::InsufficientHorizons(format!(
            "horizons {lo}..{hi} span less than two decades"
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.mean > 0.0 && p.mean.is_finite()))
    {
        return Err(VerifyError::DegenerateSlope(format!(
            "mean gradient norm {} at T = {} has no logarithm",
            p.mean, p.horizon
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.horizon as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{thm22_batch_free, thm31_eta_cap};

    fn step(t: usize) -> StepTrace {
        StepTrace {
            t,
            f_val: 1.0,
            grad_fro: 1.0,
            grad_nuc: 1.0,
            mom_err_fro: 0.0,
            mom_err_nuc: 0.0,
            b_nuc: 1.0,
            rank: 1,
            eta_used: 0.1,
            inner_grad_dir: 1.0,
            skipped: false,
        }
    }

    #[test]
    fn inner_product_with_exact_momentum() {
        let g = Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]).unwrap();
        let o = Matrix::identity(2);
        let r = check_muon_inner_product(1, &o, &g, &g).unwrap();
        assert_eq!(r.lhs, -7.0);
        assert!((r.rhs + 1.25).abs() < 1e-15);
        assert!(r.slack > 0.0);
    }

    #[test]
    fn inner_product_with_zero_gradient() {
        let g = Matrix::zeros(2, 2);
        let b = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = crate::matrix::polar_factor(&b, 1e-12).unwrap();
        let r = check_muon_inner_product(1, &o, &g, &b).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!((r.rhs - 2.5 * frobenius_norm(&b)).abs() < 1e-12);
    }

    #[test]
    fn inner_product_violation_is_reported() {
        let mut s = step(3);
        s.inner_grad_dir = -1.0;
        let err = check_muon_inner_product_trace(&s).unwrap_err();
        assert!(matches!(err, VerifyError::InequalityViolated { t: 3, .. }));
        s.skipped = true;
        assert_eq!(check_muon_inner_product_trace(&s).unwrap(), None);
    }

    #[test]
    fn descent_small_eta_limit() {
        let mut a = step(1);
        a.eta_used = 1e-9;
        let mut b = step(2);
        b.f_val = a.f_val - 0.25e-9;
        let r = check_lemma1_descent(&a, &b, 1.0, 3).unwrap().unwrap();
        assert!(r.slack >= 0.0 && r.slack < 1e-15);
    }

    #[test]
    fn descent_skipped_and_non_consecutive() {
        let mut a = step(1);
        a.skipped = true;
        assert_eq!(check_lemma1_descent(&a, &step(2), 1.0, 3).unwrap(), None);
        assert!(matches!(
            check_lemma1_descent(&step(1), &step(3), 1.0, 3),
            Err(VerifyError::NonConsecutive { .. })
        ));
    }

    #[test]
    fn spectral_identities_diag() {
        let b = Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]).unwrap();
        let delta = Matrix::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, -0.7]).unwrap();
        let r = check_spectral_identities(1, &delta, &b, 0.1).unwrap();
        assert!((r.inner_actual + 4.9).abs() < 1e-12);
        assert!((r.norm_actual - 0.7).abs() < 1e-12);
        assert!(check_spectral_identities(1, &delta.scaled(2.0), &b, 0.1).is_err());
    }

    #[test]
    fn spectral_descent_requires_small_eta() {
        let a = step(1);
        let b = step(2);
        assert!(matches!(
            check_spectral_descent_ineq(&a, &b, 20.0),
            Err(VerifyError::NotApplicable { .. })
        ));
        // η = 1/L zeroes the left side.
        let r = check_spectral_descent_ineq(&a, &b, 10.0).unwrap().unwrap();
        assert!(r.lhs.abs() < 1e-15);
    }

    #[test]
    fn norm_equivalence_cases() {
        let r = check_norm_equivalence(&[Matrix::identity(3)]).unwrap();
        assert!((r.max_ratio - 1.0).abs() < 1e-12);
        let rank1 = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]).unwrap();
        let r = check_norm_equivalence(&[rank1]).unwrap();
        assert!((r.max_ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn momentum_recursion_simple() {
        assert!(check_momentum_recursion(1, 1.0, 0.9, 0.0, 0.9, 0.0, 1.0, 3).is_ok());
        assert!(check_momentum_recursion(1, 1.0, 1.5, 0.0, 0.9, 0.0, 1.0, 3).is_err());
    }

    fn runs(seeds: usize, eta: f64, value: f64) -> Vec<SeedRun> {
        (0..seeds as u64)
            .map(|seed| SeedRun {
                seed,
                config_digest: "d".into(),
                traces: (1..=10)
                    .map(|t| StepTrace {
                        eta_used: eta,
                        grad_fro: value + seed as f64 * 1e-3,
                        grad_nuc: value,
                        ..step(t)
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn thm22_report_rules() {
        let sched = thm22_batch_free(1.0, 1.0, 0.0, 3, 10).unwrap();
        let rep =
            build_bound_report_thm22(&runs(1, sched.eta, 0.01), &sched, 1.0, 1.0, 0.0, 3).unwrap();
        assert!(rep.holds);
        assert_eq!(rep.seeds, 1);

        let doubled = runs(1, 2.0 * sched.eta, 0.01);
        assert!(matches!(
            build_bound_report_thm22(&doubled, &sched, 1.0, 1.0, 0.0, 3),
            Err(VerifyError::ConfigMismatch(_))
        ));

        let sched = thm22_batch_free(1.0, 1.0, 1.0, 3, 10).unwrap();
        assert!(matches!(
            build_bound_report_thm22(&runs(4, sched.eta, 0.01), &sched, 1.0, 1.0, 1.0, 3),
            Err(VerifyError::InsufficientSeeds { .. })
        ));

        let mut mixed = runs(2, sched.eta, 0.01);
        mixed[1].config_digest = "other".into();
        assert!(matches!(
            build_bound_report_thm22(&mixed, &sched, 1.0, 1.0, 0.0, 3),
            Err(VerifyError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn thm22_report_monotone_in_sigma() {
        let sched = thm22_batch_free(1.0, 1.0, 0.5, 3, 10).unwrap();
        let rs = runs(16, sched.eta, 5.0);
        let mut prev = f64::NEG_INFINITY;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let rep = build_bound_report_thm22(&rs, &sched, 1.0, 1.0, sigma, 3).unwrap();
            assert!(rep.rhs_explicit > prev);
            prev = rep.rhs_explicit;
        }
    }

    #[test]
    fn thm31_report_rules() {
        let invalid = thm31_eta_cap(1.0, 0.5).unwrap();
        assert!(matches!(
            build_bound_report_thm31(&runs(1, 0.05, 0.1), &invalid, 1.0, 1.0, 0.0, 10),
            Err(VerifyError::InvalidSchedule(_))
        ));
        let cap = thm31_eta_cap(1.0, 0.25).unwrap();
        let rep = build_bound_report_thm31(&runs(1, cap.eta / 2.0, 0.1), &cap, 1.0, 1.0, 0.0, 10)
            .unwrap();
        assert!(rep.holds);
        assert!(rep.o_constant.unwrap() > 0.0);
        assert!(matches!(
            build_bound_report_thm31(&runs(1, cap.eta * 2.0, 0.1), &cap, 1.0, 1.0, 0.0, 10),
            Err(VerifyError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn thm31_rhs_deterministic_collapses_to_r_term() {
        let eta = 0.0625;
        let with_noise = thm31_rhs(1.0, 1.0, 0.5, 100, 0.25, eta, 100).unwrap();
        let without = thm31_rhs(1.0, 1.0, 0.0, 100, 0.25, eta, 100).unwrap();
        assert!(with_noise > without);
        let twice_t = thm31_rhs(1.0, 1.0, 0.0, 200, 0.25, eta, 100).unwrap();
        assert!((without / twice_t - 2.0).abs() < 1e-12);
        assert_eq!(thm31_rhs(1.0, 1.0, 0.0, 100, 0.5, eta, 100), None);
    }

    fn point(horizon: usize, mean: f64) -> HorizonPoint {
        HorizonPoint {
            horizon,
            mean,
            std_error: 0.0,
            seeds: 1,
        }
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<_> = [100, 1000, 10000]
            .iter()
            .map(|&t| point(t, 3.0 / (t as f64).sqrt()))
            .collect();
        assert!((rate_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(
            rate_slope(&pts[..1]),
            Err(VerifyError::InsufficientHorizons(_))
        ));
        let narrow = [point(100, 1.0), point(200, 0.9), point(500, 0.8)];
        assert!(rate_slope(&narrow).is_err());
        let zero = [point(100, 0.0), point(1000, 0.0), point(10000, 0.0)];
        assert!(matches!(
            rate_slope(&zero),
            Err(VerifyError::DegenerateSlope(_))
        ));
    }
}
