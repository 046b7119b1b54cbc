//! TOML run configuration.
//!
//! ```toml
//! [problem]
//! kind = "noisy_quadratic"
//! spectrum = [1.0, 0.7, 0.5, 0.3]
//! cols = 3
//! sigma = 1.0
//! noise_model = "gaussian_additive"
//! data_seed = 7
//! initial_gap = 1.0
//!
//! [optimizer]
//! rule = "muon_heavy_ball"
//! schedule = "thm22_batch_free"
//!
//! [run]
//! horizon = 1000
//! seed_count = 32
//! out_dir = "out"
//!
//! [verify]
//! momentum_recursion = true
//! ```
//!
//! Every field is checked by [`RunConfig::validate`] before any compute and
//! errors name the offending field.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::{Matrix, NewtonSchulz, DEFAULT_RANK_TOL};
use crate::optimizers::{OptimizerConfig, Orthogonalizer, StepSize, UpdateRule};
use crate::problems::{NoiseModel, ProblemKind, ProblemSpec};
use crate::schedules::{
    thm22_batch_free, thm22_big_batch, thm22_power_batch, thm31_eta_cap, ScheduleParams, Theorem,
    THM31_DEFAULT_CAP_FRACTION,
};

pub const MAX_DIM: usize = 512;
pub const MAX_ENTRIES: usize = 1 << 16;
pub const MAX_SAMPLES: usize = 1 << 20;
pub const MAX_HORIZON: usize = 10_000_000;
pub const MAX_BATCH: usize = 10_000_000;
pub const MAX_SEEDS: usize = 100_000;
pub const MAX_NS_ITERATIONS: usize = 100;

const DEFAULT_LS_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }

    /// Name of the offending field, if the error is about one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Parse(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub optimizer: OptimizerSection,
    pub run: RunSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    /// Diagonal of the quadratic; its length is the row count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
    /// Row count for the data-driven problems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Noise scale: `E‖G − ∇f‖_F² = σ²` for the quadratic, target noise for
    /// least squares. Ignored by the logistic problem.
    #[serde(default)]
    pub sigma: f64,
    pub noise_model: NoiseModel,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_radius: Option<f64>,
    /// `R = f(X_1) − f*` at the starting point.
    #[serde(default = "default_gap")]
    pub initial_gap: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_gap() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthogonalizerKind {
    #[default]
    ExactPolar,
    /// Five tuned quintic steps.
    NewtonSchulz,
    /// The classic cubic `1.5 X − 0.5 X XᵀX` for `ns_iterations` steps.
    NewtonSchulzCubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub rule: UpdateRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Theorem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Batch exponent for `thm22_power_batch`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    /// Fraction of the spectral-descent step-size cap to use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap_fraction: Option<f64>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub orthogonalizer: OrthogonalizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns_iterations: Option<usize>,
    #[serde(default = "yes")]
    pub init_first_full: bool,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Shorthand for `seeds = [0, 1, …, seed_count − 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Which checks `run` evaluates inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "yes")]
    pub inner_product: bool,
    #[serde(default = "yes")]
    pub descent: bool,
    #[serde(default = "yes")]
    pub spectral_identities: bool,
    #[serde(default = "yes")]
    pub momentum_recursion: bool,
    #[serde(default = "yes")]
    pub bounds: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            inner_product: true,
            descent: true,
            spectral_identities: true,
            momentum_recursion: true,
            bounds: true,
        }
    }
}

/// A validated config with every derived quantity built.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub problem: ProblemSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: Option<ScheduleParams>,
    pub initial_gap: f64,
    pub x0: Matrix,
    pub horizon: usize,
    /// Sorted ascending.
    pub seeds: Vec<u64>,
    pub digest: String,
}

fn finite_positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(
            field,
            format!("must be finite and > 0, got {v}"),
        ))
    }
}

fn absent<T>(field: &'static str, v: &Option<T>, why: &str) -> Result<(), ConfigError> {
    if v.is_some() {
        Err(ConfigError::invalid(field, format!("not allowed {why}")))
    } else {
        Ok(())
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_problem()?;
        self.validate_optimizer()?;
        self.validate_run()
    }

    fn validate_problem(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if p.cols == 0 || p.cols > MAX_DIM {
            return Err(ConfigError::invalid(
                "problem.cols",
                format!("must be in 1..={MAX_DIM}"),
            ));
        }
        if !(p.sigma.is_finite() && p.sigma >= 0.0) {
            return Err(ConfigError::invalid(
                "problem.sigma",
                "must be finite and >= 0",
            ));
        }
        finite_positive("problem.initial_gap", p.initial_gap)?;
        let rows = match p.kind {
            ProblemKind::NoisyQuadratic => {
                let spectrum = p.spectrum.as_ref().ok_or_else(|| {
                    ConfigError::invalid("problem.spectrum", "required for noisy_quadratic")
                })?;
                if spectrum.is_empty() || spectrum.len() > MAX_DIM {
                    return Err(ConfigError::invalid(
                        "problem.spectrum",
                        format!("needs 1..={MAX_DIM} entries"),
                    ));
                }
                if spectrum.iter().any(|a| !a.is_finite()) || spectrum.iter().all(|&a| a == 0.0) {
                    return Err(ConfigError::invalid(
                        "problem.spectrum",
                        "entries must be finite and not all zero",
                    ));
                }
                if p.rows.is_some_and(|r| r != spectrum.len()) {
                    return Err(ConfigError::invalid(
                        "problem.rows",
                        "must equal the spectrum length",
                    ));
                }
                match p.noise_model {
                    NoiseModel::DataSampling => {
                        return Err(ConfigError::invalid(
                            "problem.noise_model",
                            "noisy_quadratic supports none or gaussian_additive",
                        ))
                    }
                    NoiseModel::None if p.sigma > 0.0 => {
                        return Err(ConfigError::invalid(
                            "problem.sigma",
                            "must be 0 with noise_model = \"none\"",
                        ))
                    }
                    _ => {}
                }
                absent("problem.samples", &p.samples, "for noisy_quadratic")?;
                absent("problem.ridge", &p.ridge, "for noisy_quadratic")?;
                absent(
                    "problem.variance_radius",
                    &p.variance_radius,
                    "for noisy_quadratic",
                )?;
                spectrum.len()
            }
            ProblemKind::LeastSquares | ProblemKind::LogisticMatrix => {
                absent("problem.spectrum", &p.spectrum, "for data-driven problems")?;
                let rows = p.rows.ok_or_else(|| {
                    ConfigError::invalid("problem.rows", "required for data-driven problems")
                })?;
                if rows == 0 || rows > MAX_DIM {
                    return Err(ConfigError::invalid(
                        "problem.rows",
                        format!("must be in 1..={MAX_DIM}"),
                    ));
                }
                let samples = p.samples.ok_or_else(|| {
                    ConfigError::invalid("problem.samples", "required for data-driven problems")
                })?;
                if samples == 0 || samples > MAX_SAMPLES {
                    return Err(ConfigError::invalid(
                        "problem.samples",
                        format!("must be in 1..={MAX_SAMPLES}"),
                    ));
                }
                if p.noise_model == NoiseModel::GaussianAdditive {
                    return Err(ConfigError::invalid(
                        "problem.noise_model",
                        "data-driven problems support none or data_sampling",
                    ));
                }
                if p.kind == ProblemKind::LeastSquares {
                    absent("problem.ridge", &p.ridge, "for least_squares")?;
                    if let Some(r) = p.variance_radius {
                        finite_positive("problem.variance_radius", r)?;
                    }
                } else {
                    absent(
                        "problem.variance_radius",
                        &p.variance_radius,
                        "for logistic_matrix",
                    )?;
                    let ridge = p.ridge.ok_or_else(|| {
                        ConfigError::invalid("problem.ridge", "required for logistic_matrix")
                    })?;
                    finite_positive("problem.ridge", ridge)?;
                }
                rows
            }
        };
        if rows * p.cols > MAX_ENTRIES {
            return Err(ConfigError::invalid(
                "problem.cols",
                format!("rows x cols must not exceed {MAX_ENTRIES}"),
            ));
        }
        if p.kind != ProblemKind::NoisyQuadratic
            && rows * p.cols * p.samples.unwrap_or(0) > 64 * MAX_SAMPLES
        {
            return Err(ConfigError::invalid(
                "problem.samples",
                "rows x cols x samples is too large",
            ));
        }
        Ok(())
    }

    fn validate_optimizer(&self) -> Result<(), ConfigError> {
        let o = &self.optimizer;
        finite_positive("optimizer.rank_tol", o.rank_tol)?;
        match (o.eta, o.schedule) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid(
                    "optimizer.eta",
                    "give either eta or schedule, not both",
                ))
            }
            (None, None) => {
                return Err(ConfigError::invalid(
                    "optimizer.eta",
                    "one of eta or schedule is required",
                ))
            }
            (Some(eta), None) => finite_positive("optimizer.eta", eta)?,
            (None, Some(_)) => {}
        }
        if let Some(beta) = o.beta {
            if !(0.0..1.0).contains(&beta) {
                return Err(ConfigError::invalid(
                    "optimizer.beta",
                    format!("must lie in [0, 1), got {beta}"),
                ));
            }
        }
        if let Some(b) = o.batch_size {
            if b == 0 || b > MAX_BATCH {
                return Err(ConfigError::invalid(
                    "optimizer.batch_size",
                    format!("must be in 1..={MAX_BATCH}"),
                ));
            }
        }
        match o.schedule {
            None => {
                if o.beta.is_none() {
                    return Err(ConfigError::invalid(
                        "optimizer.beta",
                        "required without a schedule",
                    ));
                }
                absent("optimizer.power", &o.power, "without thm22_power_batch")?;
                absent("optimizer.cap_fraction", &o.cap_fraction, "without thm31")?;
            }
            Some(theorem) => {
                if theorem.is_thm22() && o.rule != UpdateRule::MuonHeavyBall {
                    return Err(ConfigError::invalid(
                        "optimizer.schedule",
                        format!("{} prescribes heavy-ball Muon", theorem.name()),
                    ));
                }
                if theorem == Theorem::Thm31 && o.rule != UpdateRule::SpectralDescent {
                    return Err(ConfigError::invalid(
                        "optimizer.schedule",
                        "thm31 prescribes spectral descent",
                    ));
                }
                if theorem.is_thm22() {
                    absent(
                        "optimizer.batch_size",
                        &o.batch_size,
                        "with a heavy-ball schedule",
                    )?;
                    absent("optimizer.cap_fraction", &o.cap_fraction, "without thm31")?;
                }
                match theorem {
                    Theorem::Thm22BatchFree => {
                        absent("optimizer.beta", &o.beta, "with thm22_batch_free")?;
                    }
                    _ => {
                        let beta = o.beta.ok_or_else(|| {
                            ConfigError::invalid(
                                "optimizer.beta",
                                format!("required by {}", theorem.name()),
                            )
                        })?;
                        if beta == 0.0 {
                            return Err(ConfigError::invalid(
                                "optimizer.beta",
                                format!("{} needs beta in (0, 1)", theorem.name()),
                            ));
                        }
                    }
                }
                if theorem == Theorem::Thm22PowerBatch {
                    let power = o.power.ok_or_else(|| {
                        ConfigError::invalid("optimizer.power", "required by thm22_power_batch")
                    })?;
                    if !(power > 0.0 && power < 1.0) {
                        return Err(ConfigError::invalid(
                            "optimizer.power",
                            "must lie in (0, 1)",
                        ));
                    }
                } else {
                    absent("optimizer.power", &o.power, "without thm22_power_batch")?;
                }
                if theorem == Theorem::Thm31 {
                    let beta = o.beta.unwrap_or(0.0);
                    if beta >= 0.5 {
                        return Err(ConfigError::invalid(
                            "optimizer.beta",
                            "thm31 has no admissible step size for beta >= 1/2",
                        ));
                    }
                    if let Some(c) = o.cap_fraction {
                        if !(c > 0.0 && c <= 1.0) {
                            return Err(ConfigError::invalid(
                                "optimizer.cap_fraction",
                                "must lie in (0, 1]",
                            ));
                        }
                    }
                }
            }
        }
        match (o.orthogonalizer, o.ns_iterations) {
            (OrthogonalizerKind::NewtonSchulzCubic, Some(k)) if k == 0 || k > MAX_NS_ITERATIONS => {
                Err(ConfigError::invalid(
                    "optimizer.ns_iterations",
                    format!("must be in 1..={MAX_NS_ITERATIONS}"),
                ))
            }
            (OrthogonalizerKind::NewtonSchulzCubic, _) | (_, None) => Ok(()),
            (_, Some(_)) => Err(ConfigError::invalid(
                "optimizer.ns_iterations",
                "only used by newton_schulz_cubic",
            )),
        }
    }

    fn validate_run(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        if r.horizon == 0 || r.horizon > MAX_HORIZON {
            return Err(ConfigError::invalid(
                "run.horizon",
                format!("must be in 1..={MAX_HORIZON}"),
            ));
        }
        match (&r.seeds, r.seed_count) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid(
                    "run.seeds",
                    "give either seeds or seed_count, not both",
                ))
            }
            (None, None) => {
                return Err(ConfigError::invalid(
                    "run.seeds",
                    "one of seeds or seed_count is required",
                ))
            }
            (Some(list), None) => {
                if list.is_empty() || list.len() > MAX_SEEDS {
                    return Err(ConfigError::invalid(
                        "run.seeds",
                        format!("needs 1..={MAX_SEEDS} seeds"),
                    ));
                }
                if list.iter().collect::<BTreeSet<_>>().len() != list.len() {
                    return Err(ConfigError::invalid("run.seeds", "seeds must be distinct"));
                }
            }
            (None, Some(k)) => {
                if k == 0 || k > MAX_SEEDS {
                    return Err(ConfigError::invalid(
                        "run.seed_count",
                        format!("must be in 1..={MAX_SEEDS}"),
                    ));
                }
            }
        }
        if r.threads == Some(0) {
            return Err(ConfigError::invalid("run.threads", "must be >= 1"));
        }
        Ok(())
    }

    /// Seeds in ascending order.
    pub fn seed_list(&self) -> Vec<u64> {
        let mut seeds = match (&self.run.seeds, self.run.seed_count) {
            (Some(list), _) => list.clone(),
            (None, Some(k)) => (0..k as u64).collect(),
            (None, None) => Vec::new(),
        };
        seeds.sort_unstable();
        seeds
    }

    /// Replaces the seed list with `0..count`.
    pub fn set_seed_count(&mut self, count: usize) {
        self.run.seeds = None;
        self.run.seed_count = Some(count);
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory and
    /// thread count and listing seeds explicitly in ascending order.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = None;
        c.run.threads = None;
        c.run.seeds = Some(self.seed_list());
        c.run.seed_count = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn build_problem(&self) -> Result<ProblemSpec, ConfigError> {
        let p = &self.problem;
        let built = match p.kind {
            ProblemKind::NoisyQuadratic => ProblemSpec::noisy_quadratic(
                p.spectrum.as_deref().unwrap_or(&[]),
                p.cols,
                p.sigma,
                p.noise_model,
                p.data_seed,
            ),
            ProblemKind::LeastSquares => ProblemSpec::least_squares(
                p.rows.unwrap_or(0),
                p.cols,
                p.samples.unwrap_or(0),
                p.sigma,
                p.variance_radius.unwrap_or(DEFAULT_LS_RADIUS),
                p.noise_model,
                p.data_seed,
            ),
            ProblemKind::LogisticMatrix => ProblemSpec::logistic_matrix(
                p.rows.unwrap_or(0),
                p.cols,
                p.samples.unwrap_or(0),
                p.ridge.unwrap_or(0.0),
                p.noise_model,
                p.data_seed,
            ),
        };
        built.map_err(|e| ConfigError::invalid("problem", e.to_string()))
    }

    /// Schedule implied by the config for `problem`, if one is referenced.
    pub fn schedule(&self, problem: &ProblemSpec) -> Result<Option<ScheduleParams>, ConfigError> {
        let o = &self.optimizer;
        let Some(theorem) = o.schedule else {
            return Ok(None);
        };
        let r = self.problem.initial_gap;
        let l = problem.lipschitz_fro;
        let n = problem.cols();
        let t = self.run.horizon;
        let beta = o.beta.unwrap_or(0.0);
        let params = match theorem {
            Theorem::Thm22BatchFree => thm22_batch_free(r, l, problem.sigma_sq_fro.sqrt(), n, t),
            Theorem::Thm22BigBatch => thm22_big_batch(r, l, n, t, beta),
            Theorem::Thm22PowerBatch => thm22_power_batch(r, l, n, t, beta, o.power.unwrap_or(0.0)),
            Theorem::Thm31 => thm31_eta_cap(problem.lipschitz_dual, beta),
        }
        .map_err(|e| ConfigError::invalid("optimizer.schedule", e.to_string()))?;
        if !params.valid {
            return Err(ConfigError::invalid("optimizer.schedule", params.reason));
        }
        if params.batch > MAX_BATCH {
            return Err(ConfigError::invalid(
                "optimizer.schedule",
                format!("prescribed batch {} exceeds {MAX_BATCH}", params.batch),
            ));
        }
        Ok(Some(params))
    }

    /// Validates and builds everything a run needs.
    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        self.validate()?;
        let problem = self.build_problem()?;
        let schedule = self.schedule(&problem)?;
        let o = &self.optimizer;
        let (beta, eta, batch) = match &schedule {
            None => (
                o.beta.unwrap_or(0.0),
                o.eta.unwrap_or(0.0),
                o.batch_size.unwrap_or(1),
            ),
            Some(s) if s.theorem == Theorem::Thm31 => (
                s.beta,
                s.eta * o.cap_fraction.unwrap_or(THM31_DEFAULT_CAP_FRACTION),
                o.batch_size.unwrap_or(1),
            ),
            Some(s) => (s.beta, s.eta, s.batch),
        };
        let orthogonalizer = match o.orthogonalizer {
            OrthogonalizerKind::ExactPolar => Orthogonalizer::ExactPolar,
            OrthogonalizerKind::NewtonSchulz => Orthogonalizer::NewtonSchulz(NewtonSchulz::tuned()),
            OrthogonalizerKind::NewtonSchulzCubic => Orthogonalizer::NewtonSchulz(
                NewtonSchulz::cubic(o.ns_iterations.unwrap_or(5))
                    .map_err(|e| ConfigError::invalid("optimizer.ns_iterations", e.to_string()))?,
            ),
        };
        let optimizer = OptimizerConfig::new(o.rule, beta, StepSize::Constant(eta))
            .with_batch_size(batch)
            .with_rank_tol(o.rank_tol)
            .with_init_first_full(o.init_first_full)
            .with_orthogonalizer(orthogonalizer);
        optimizer
            .validate()
            .map_err(|e| ConfigError::invalid("optimizer", e.to_string()))?;
        let x0 = problem
            .initial_point(self.problem.init_seed, self.problem.initial_gap)
            .map_err(|e| ConfigError::invalid("problem.initial_gap", e.to_string()))?;
        Ok(ResolvedRun {
            problem,
            optimizer,
            schedule,
            initial_gap: self.problem.initial_gap,
            x0,
            horizon: self.run.horizon,
            seeds: self.seed_list(),
            digest: self.digest(),
        })
    }
}
