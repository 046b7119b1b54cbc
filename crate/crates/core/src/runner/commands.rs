use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, ResolvedRun, RunConfig, VerifySection};
use super::trace::{TraceError, TraceFile};
use crate::matrix::{frobenius_norm, random_semi_orthogonal_with, Matrix, NewtonSchulz};
use crate::optimizers::{run_epoch_observed, OptimizerError, OptimizerState, StepView, UpdateRule};
use crate::schedules::Theorem;
use crate::verifier::{
    build_bound_report_thm22, build_bound_report_thm31, check_momentum_recursion,
    check_spectral_identities, rate_slope, verify_trace, BoundReport, CheckSummary, HorizonPoint,
    SeedRun, StepTrace, TraceCheckContext, VerifyError, CHECK_LEMMA_DESCENT,
    CHECK_MOMENTUM_RECURSION, CHECK_MUON_INNER, CHECK_SPECTRAL_DESCENT, CHECK_SPECTRAL_IDENTITIES,
    IDENTITY_TOL,
};

pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const VERIFY_REPORT_FILE: &str = "verify_report.json";

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed_{seed}.csv")
}

/// Process outcome, ordered by precedence when several apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Success,
    VerificationFailed,
    Diverged,
    Usage,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Usage => 1,
            ExitStatus::VerificationFailed => 2,
            ExitStatus::Diverged => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Trace { path: PathBuf, source: TraceError },
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("no trace files in {}", .0.display())]
    MissingTraces(PathBuf),
    #[error("seed {seed} at horizon {horizon} failed: {message}")]
    SeedFailed {
        seed: u64,
        horizon: usize,
        message: String,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl RunError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            RunError::Config(_) | RunError::Io { .. } | RunError::ThreadPool(_) => {
                ExitStatus::Usage
            }
            RunError::SeedFailed { .. } => ExitStatus::Diverged,
            RunError::Trace { .. } | RunError::Verify(_) | RunError::MissingTraces(_) => {
                ExitStatus::VerificationFailed
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Completed,
    Diverged,
    Failed,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub traces: Vec<StepTrace>,
    pub checks: Vec<CheckSummary>,
    pub status: SeedStatus,
    pub failure: Option<String>,
}

fn identity_slack(
    summary: &mut CheckSummary,
    r: Result<crate::verifier::IdentityReport, VerifyError>,
) {
    match r {
        Ok(rep) => {
            let s = IDENTITY_TOL - rep.max_rel_err;
            summary.checked += 1;
            summary.min_slack = Some(summary.min_slack.map_or(s, |m| m.min(s)));
        }
        Err(e) => summary.record(Err(e)),
    }
}

/// Runs one seed, evaluating the enabled inline checks.
pub fn execute_seed(run: &ResolvedRun, verify: &VerifySection, seed: u64) -> SeedResult {
    let rule = run.optimizer.rule;
    let beta = run.optimizer.beta;
    let l_fro = run.problem.lipschitz_fro;
    let n = run.problem.cols();
    let mut identities = CheckSummary::new(CHECK_SPECTRAL_IDENTITIES);
    let mut recursion = CheckSummary::new(CHECK_MOMENTUM_RECURSION);
    let mut prev: Option<(f64, f64)> = None;
    let observe = |v: &StepView<'_>| {
        if rule == UpdateRule::SpectralDescent && verify.spectral_identities && !v.outcome.skipped {
            identity_slack(
                &mut identities,
                check_spectral_identities(
                    v.t,
                    &v.outcome.direction,
                    &v.outcome.momentum_after,
                    v.outcome.eta,
                ),
            );
        }
        if rule == UpdateRule::MuonHeavyBall && verify.momentum_recursion {
            if let Some((prev_err, prev_eta)) = prev {
                let noise = frobenius_norm(
                    &v.stochastic_grad
                        .sub(v.grad)
                        .expect("gradients share the parameter shape"),
                );
                recursion.record(
                    check_momentum_recursion(
                        v.t - 1,
                        prev_err,
                        v.trace.mom_err_fro,
                        noise,
                        beta,
                        prev_eta,
                        l_fro,
                        n,
                    )
                    .map(Some),
                );
            }
            prev = Some((v.trace.mom_err_fro, v.trace.eta_used));
        }
    };

    let state = OptimizerState::new(run.optimizer.clone(), run.problem.shape());
    let outcome = state.map_err(|e| (e, Vec::new())).and_then(|mut state| {
        run_epoch_observed(
            &mut state,
            &run.problem,
            &run.x0,
            run.horizon,
            seed,
            observe,
        )
        .map_err(|e| (e.error, e.completed))
    });
    let (traces, status, failure) = match outcome {
        Ok(t) => (t, SeedStatus::Completed, None),
        Err((e, completed)) => {
            let status = if matches!(e, OptimizerError::Diverged { .. }) {
                SeedStatus::Diverged
            } else {
                SeedStatus::Failed
            };
            log::warn!("seed {seed}: {e}");
            (completed, status, Some(e.to_string()))
        }
    };

    let ctx = TraceCheckContext {
        rule,
        lipschitz_fro: l_fro,
        lipschitz_dual: run.problem.lipschitz_dual,
        n,
    };
    let mut checks: Vec<CheckSummary> = verify_trace(&traces, &ctx)
        .into_iter()
        .filter(|c| match c.check.as_str() {
            CHECK_MUON_INNER => verify.inner_product,
            CHECK_LEMMA_DESCENT | CHECK_SPECTRAL_DESCENT => verify.descent,
            _ => true,
        })
        .collect();
    if rule == UpdateRule::SpectralDescent && verify.spectral_identities {
        checks.push(identities);
    }
    if rule == UpdateRule::MuonHeavyBall && verify.momentum_recursion {
        checks.push(recursion);
    }
    SeedResult {
        seed,
        traces,
        checks,
        status,
        failure,
    }
}

/// Runs every seed of `run`, in parallel, returning results in ascending
/// seed order. The results do not depend on `threads`.
pub fn execute_seeds(
    run: &ResolvedRun,
    verify: &VerifySection,
    threads: Option<usize>,
) -> Result<Vec<SeedResult>, RunError> {
    let work = || -> Vec<SeedResult> {
        run.seeds
            .par_iter()
            .map(|&seed| execute_seed(run, verify, seed))
            .collect()
    };
    match threads {
        None => Ok(work()),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map(|pool| pool.install(work))
            .map_err(|e| RunError::ThreadPool(e.to_string())),
    }
}

/// Bound report for a run whose config references a schedule.
/// `Ok(None)` when there is no schedule; `Err` carries the reason the
/// report could not be built.
fn bound_report(run: &ResolvedRun, runs: &[SeedRun]) -> Result<Option<BoundReport>, VerifyError> {
    let Some(schedule) = &run.schedule else {
        return Ok(None);
    };
    let p = &run.problem;
    let report = if schedule.theorem == Theorem::Thm31 {
        build_bound_report_thm31(
            runs,
            schedule,
            run.initial_gap,
            p.lipschitz_dual,
            p.sigma_sq_nuc,
            run.optimizer.batch_size,
        )?
    } else {
        build_bound_report_thm22(
            runs,
            schedule,
            run.initial_gap,
            p.lipschitz_fro,
            p.sigma_sq_fro.sqrt(),
            p.cols(),
        )?
    };
    Ok(Some(report))
}

/// Bound report plus the status it implies. Too few seeds is a note, not a
/// failure.
fn evaluate_bound(
    run: &ResolvedRun,
    runs: &[SeedRun],
) -> (Option<BoundReport>, Option<String>, ExitStatus) {
    match bound_report(run, runs) {
        Ok(Some(rep)) => {
            let status = if rep.holds {
                ExitStatus::Success
            } else {
                ExitStatus::VerificationFailed
            };
            (Some(rep), None, status)
        }
        Ok(None) => (None, None, ExitStatus::Success),
        Err(e @ VerifyError::InsufficientSeeds { .. }) => (
            None,
            Some(format!("bound not evaluated: {e}")),
            ExitStatus::Success,
        ),
        Err(e) => (
            None,
            Some(format!("bound not evaluated: {e}")),
            ExitStatus::VerificationFailed,
        ),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub status: SeedStatus,
    pub steps: usize,
    pub failure: Option<String>,
    pub checks: Vec<CheckSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config_digest: String,
    pub horizon: usize,
    pub seeds: Vec<SeedReport>,
    pub bound: Option<BoundReport>,
    pub bound_note: Option<String>,
    pub status: ExitStatus,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Runs `cfg` and writes the run directory `out_dir`. Inline check failures
/// are reported in the returned status; traces are written regardless.
pub fn cmd_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport, RunError> {
    let run = cfg.resolve()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut stored = cfg.clone();
    stored.run.out_dir = None;
    let cfg_path = out_dir.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, stored.to_toml_string()).map_err(io_err(&cfg_path))?;

    let results = execute_seeds(&run, &cfg.verify, cfg.run.threads)?;
    let mut status = ExitStatus::Success;
    let mut seeds = Vec::with_capacity(results.len());
    for r in &results {
        let path = out_dir.join(trace_file_name(r.seed));
        TraceFile::new(run.digest.clone(), r.seed, r.traces.clone())
            .write(&path)
            .map_err(|source| RunError::Trace {
                path: path.clone(),
                source,
            })?;
        if r.status != SeedStatus::Completed {
            status = status.max(ExitStatus::Diverged);
        }
        if r.checks.iter().any(|c| !c.passed()) {
            status = status.max(ExitStatus::VerificationFailed);
        }
        seeds.push(SeedReport {
            seed: r.seed,
            status: r.status,
            steps: r.traces.len(),
            failure: r.failure.clone(),
            checks: r.checks.clone(),
        });
    }

    let (bound, bound_note) =
        if cfg.verify.bounds && results.iter().all(|r| r.status == SeedStatus::Completed) {
            let runs: Vec<SeedRun> = results
                .iter()
                .map(|r| SeedRun {
                    seed: r.seed,
                    config_digest: run.digest.clone(),
                    traces: r.traces.clone(),
                })
                .collect();
            let (bound, note, s) = evaluate_bound(&run, &runs);
            status = status.max(s);
            (bound, note)
        } else {
            (None, None)
        };

    let report = RunReport {
        config_digest: run.digest.clone(),
        horizon: run.horizon,
        seeds,
        bound,
        bound_note,
        status,
    };
    write_json(&out_dir.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    /// Per-step checks merged over all seeds.
    pub checks: Vec<CheckSummary>,
    pub bound: Option<BoundReport>,
    pub bound_note: Option<String>,
    pub status: ExitStatus,
}

fn read_traces(dir: &Path) -> Result<Vec<TraceFile>, RunError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trace_seed_") && n.ends_with(".csv"))
        })
        .collect();
    if paths.is_empty() {
        return Err(RunError::MissingTraces(dir.to_path_buf()));
    }
    paths.sort();
    let mut files = paths
        .iter()
        .map(|p| {
            TraceFile::read(p).map_err(|source| RunError::Trace {
                path: p.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    files.sort_by_key(|f| f.seed);
    Ok(files)
}

/// Re-checks a run directory from its traces and `run.toml`, writing
/// `verify_report.json`. Refuses directories whose traces disagree on the
/// config digest. Checks that need the full matrices (the spectral-descent
/// identities and the momentum recursion) are only evaluated inline by
/// [`cmd_run`].
pub fn cmd_verify(dir: &Path) -> Result<VerifyReport, RunError> {
    let cfg_path = dir.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    let run = cfg.resolve()?;
    let files = read_traces(dir)?;
    let digest = files[0].digest.clone();
    for f in &files {
        if f.digest != digest {
            return Err(VerifyError::DigestMismatch {
                expected: digest,
                found: f.digest.clone(),
            }
            .into());
        }
    }
    if digest != run.digest {
        return Err(VerifyError::DigestMismatch {
            expected: run.digest,
            found: digest,
        }
        .into());
    }

    let ctx = TraceCheckContext {
        rule: run.optimizer.rule,
        lipschitz_fro: run.problem.lipschitz_fro,
        lipschitz_dual: run.problem.lipschitz_dual,
        n: run.problem.cols(),
    };
    let mut merged: Vec<CheckSummary> = Vec::new();
    for f in &files {
        for c in verify_trace(&f.rows, &ctx) {
            match merged.iter_mut().find(|m| m.check == c.check) {
                Some(m) => m.merge(&c),
                None => merged.push(c),
            }
        }
    }
    let mut status = if merged.iter().all(CheckSummary::passed) {
        ExitStatus::Success
    } else {
        ExitStatus::VerificationFailed
    };
    let runs: Vec<SeedRun> = files
        .iter()
        .map(|f| SeedRun {
            seed: f.seed,
            config_digest: f.digest.clone(),
            traces: f.rows.clone(),
        })
        .collect();
    let (bound, bound_note) = if cfg.verify.bounds {
        let (b, note, s) = evaluate_bound(&run, &runs);
        status = status.max(s);
        (b, note)
    } else {
        (None, None)
    };
    let report = VerifyReport {
        config_digest: digest,
        seeds: files.iter().map(|f| f.seed).collect(),
        checks: merged,
        bound,
        bound_note,
        status,
    };
    write_json(&dir.join(VERIFY_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub points: Vec<HorizonPoint>,
    pub slope: f64,
}

/// Runs `template` at each horizon with seeds `0..seed_count` (schedules are
/// recomputed per horizon) and fits the log-log slope of the mean gradient
/// norm.
pub fn cmd_sweep(
    template: &RunConfig,
    horizons: &[usize],
    seed_count: usize,
) -> Result<SweepReport, RunError> {
    let mut distinct = horizons.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(VerifyError::InsufficientHorizons(format!(
            "{} distinct horizons, need at least 3",
            distinct.len()
        ))
        .into());
    }
    let quiet = VerifySection {
        inner_product: false,
        descent: false,
        spectral_identities: false,
        momentum_recursion: false,
        bounds: false,
    };
    let mut points = Vec::with_capacity(distinct.len());
    for &horizon in &distinct {
        let mut cfg = template.clone();
        cfg.run.horizon = horizon;
        cfg.set_seed_count(seed_count);
        let run = cfg.resolve()?;
        let results = execute_seeds(&run, &quiet, cfg.run.threads)?;
        if let Some(bad) = results.iter().find(|r| r.status != SeedStatus::Completed) {
            return Err(RunError::SeedFailed {
                seed: bad.seed,
                horizon,
                message: bad.failure.clone().unwrap_or_default(),
            });
        }
        let traces: Vec<Vec<StepTrace>> = results.into_iter().map(|r| r.traces).collect();
        points.push(HorizonPoint::from_runs(&traces)?);
    }
    let slope = rate_slope(&points)?;
    Ok(SweepReport { points, slope })
}

pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";

/// Writes `sweep_report.json` into `dir`, creating it if needed.
pub fn write_sweep_report(dir: &Path, report: &SweepReport) -> Result<PathBuf, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(SWEEP_REPORT_FILE);
    write_json(&path, report)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub shapes: Vec<(usize, usize)>,
    pub trials: usize,
    /// Condition numbers of the test inputs; 1 gives orthogonal inputs.
    pub conditions: Vec<f64>,
    pub tolerance: f64,
    pub seed: u64,
    pub newton_schulz: NewtonSchulz,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            shapes: vec![(32, 32)],
            trials: 20,
            conditions: vec![1.0, 10.0, 1e6],
            tolerance: 1e-2,
            seed: 0,
            newton_schulz: NewtonSchulz::tuned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub rows: usize,
    pub cols: usize,
    pub condition: f64,
    pub trials: usize,
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub iterations: usize,
    pub tolerance: f64,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>10} {:>7} {:>12} {:>12} {:>7}\n",
            "rows", "cols", "condition", "trials", "max_dev", "mean_dev", "within"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>6} {:>10.3e} {:>7} {:>12.4e} {:>12.4e} {:>7}\n",
                r.rows,
                r.cols,
                r.condition,
                r.trials,
                r.max_deviation,
                r.mean_deviation,
                r.within_tolerance
            ));
        }
        out
    }
}

/// `U diag(s) Vᵀ` with singular values log-spaced from 1 down to
/// `1/condition`, together with its polar factor `U Vᵀ`.
pub fn conditioned_matrix(
    rows: usize,
    cols: usize,
    condition: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, Matrix), RunError> {
    let k = rows.min(cols);
    let to_run = |e: crate::matrix::MatrixError| RunError::Verify(VerifyError::Matrix(e));
    let u = random_semi_orthogonal_with(rows, k, rng).map_err(to_run)?;
    let v = random_semi_orthogonal_with(cols, k, rng).map_err(to_run)?;
    let s: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                1.0
            } else {
                condition.powf(-(i as f64) / (k - 1) as f64)
            }
        })
        .collect();
    let d = Matrix::from_diagonal(&s).map_err(to_run)?;
    let vt = v.transpose();
    let b = u.matmul(&d).and_then(|ud| ud.matmul(&vt)).map_err(to_run)?;
    let polar = u.matmul(&vt).map_err(to_run)?;
    Ok((b, polar))
}

/// Frobenius deviation of Newton–Schulz from the exact polar factor over
/// random inputs of prescribed condition number. Large deviations are
/// reported, not treated as errors.
pub fn cmd_compare_orthogonalizers(opts: &CompareOptions) -> Result<CompareReport, RunError> {
    if opts.trials == 0 {
        return Err(ConfigError::Invalid {
            field: "trials",
            reason: "must be >= 1".into(),
        }
        .into());
    }
    let mut rows = Vec::new();
    for (si, &(m, n)) in opts.shapes.iter().enumerate() {
        for (ci, &kappa) in opts.conditions.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(opts.seed ^ ((si as u64) << 32) ^ ((ci as u64) << 16));
            let mut devs = Vec::with_capacity(opts.trials);
            for _ in 0..opts.trials {
                let (b, polar) = conditioned_matrix(m, n, kappa, &mut rng)?;
                let dev = match opts.newton_schulz.orthogonalize(&b) {
                    Ok(ns) => frobenius_norm(&ns.sub(&polar).expect("same shape")),
                    Err(_) => f64::INFINITY,
                };
                devs.push(dev);
            }
            let max = devs.iter().copied().fold(0.0, f64::max);
            let mean = devs.iter().sum::<f64>() / devs.len() as f64;
            rows.push(CompareRow {
                rows: m,
                cols: n,
                condition: kappa,
                trials: opts.trials,
                max_deviation: max,
                mean_deviation: mean,
                within_tolerance: max <= opts.tolerance,
            });
        }
    }
    Ok(CompareReport {
        iterations: opts.newton_schulz.iterations(),
        tolerance: opts.tolerance,
        rows,
    })
}
