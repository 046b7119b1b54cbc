//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fd_gradient, fro, fro_dist, problem_suite};
use muonlab::matrix::{
    frobenius_inner, nuclear_norm, polar_factor, random_semi_orthogonal_with, Matrix,
    DEFAULT_RANK_TOL,
};
use muonlab::runner::config::OrthogonalizerKind;
use muonlab::runner::{
    cmd_compare_orthogonalizers, cmd_run, cmd_sweep, execute_seed, trace_file_name, CompareOptions,
    RunConfig, SeedResult, SeedStatus,
};
use muonlab::schedules::thm31_eta_cap;
use muonlab::verifier::{
    check_norm_equivalence, CheckSummary, CHECK_LEMMA_DESCENT, CHECK_SPECTRAL_DESCENT,
    CHECK_SPECTRAL_IDENTITIES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETERMINISTIC: &str = include_str!("../../../configs/muon_deterministic.toml");
const BATCH_FREE: &str = include_str!("../../../configs/muon_batch_free.toml");
const SPECTRAL: &str = include_str!("../../../configs/spectral_descent.toml");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml_str(text).expect("shipped config parses")
}

fn single_seed(mut cfg: RunConfig, horizon: usize) -> RunConfig {
    cfg.run.horizon = horizon;
    cfg.run.seed_count = None;
    cfg.run.seeds = Some(vec![0]);
    cfg
}

fn run_one(cfg: &RunConfig) -> Result<SeedResult, String> {
    let run = cfg.resolve().map_err(|e| e.to_string())?;
    let result = execute_seed(&run, &cfg.verify, run.seeds[0]);
    if result.status != SeedStatus::Completed {
        return Err(format!("seed did not complete: {:?}", result.failure));
    }
    Ok(result)
}

fn summary<'a>(result: &'a SeedResult, check: &str) -> Result<&'a CheckSummary, String> {
    result
        .checks
        .iter()
        .find(|c| c.check == check)
        .ok_or_else(|| format!("check {check} was not evaluated"))
}

/// Requires a check to have run on `expected` steps with no violation.
fn clean(result: &SeedResult, check: &str, expected: usize) -> Outcome {
    let s = summary(result, check)?;
    if s.violations > 0 {
        return Err(format!(
            "{} violations of {check}; first: {:?}",
            s.violations, s.first_violation
        ));
    }
    if s.checked + s.bypassed != expected || s.bypassed > 0 {
        return Err(format!(
            "{check}: {} checked, {} bypassed, expected {expected} checked",
            s.checked, s.bypassed
        ));
    }
    Ok(format!(
        "{check} {} steps, min slack {:.3e}",
        s.checked,
        s.min_slack.unwrap_or(f64::NAN)
    ))
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    if elapsed > limit {
        Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"))
    } else {
        Ok(detail)
    }
}

fn polar_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let b = Matrix::random_gaussian(4, 3, &mut rng);
        let p = polar_factor(&b, DEFAULT_RANK_TOL).map_err(|e| e.to_string())?;
        let best = fro_dist(&p, &b);
        for _ in 0..1000 {
            let q = random_semi_orthogonal_with(4, 3, &mut rng).map_err(|e| e.to_string())?;
            if fro_dist(&q, &b) < best {
                violations += 1;
            }
        }
    }
    if violations > 0 {
        return Err(format!(
            "{violations} sampled Q closer than the polar factor"
        ));
    }
    within(
        start.elapsed(),
        Duration::from_secs(30),
        "0 violations in 10^6 comparisons".into(),
    )
}

fn duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (m, n) = (rng.random_range(1..9), rng.random_range(1..9));
        let b = Matrix::random_gaussian(m, n, &mut rng);
        let p = polar_factor(&b, DEFAULT_RANK_TOL).map_err(|e| e.to_string())?;
        let nuc = nuclear_norm(&b);
        let rel = (frobenius_inner(&p, &b).map_err(|e| e.to_string())? - nuc).abs() / nuc;
        worst = worst.max(rel);
    }
    if worst > 1e-8 {
        return Err(format!("max relative error {worst:.3e}"));
    }
    Ok(format!("max relative error {worst:.3e}"))
}

fn spectral_identities() -> Outcome {
    let result = run_one(&single_seed(config(SPECTRAL), 1000))?;
    clean(&result, CHECK_SPECTRAL_IDENTITIES, 1000)
}

fn muon_configs(horizon: usize) -> [RunConfig; 2] {
    [
        single_seed(config(DETERMINISTIC), horizon),
        single_seed(config(BATCH_FREE), horizon),
    ]
}

fn lemma_runs(cfgs: &[RunConfig]) -> Outcome {
    let mut parts = Vec::new();
    for cfg in cfgs {
        let result = run_one(cfg)?;
        let detail = clean(&result, CHECK_LEMMA_DESCENT, cfg.run.horizon - 1)?;
        parts.push(format!("sigma={}: {detail}", cfg.problem.sigma));
    }
    Ok(parts.join("; "))
}

fn lemma_descent() -> Outcome {
    let start = Instant::now();
    let detail = lemma_runs(&muon_configs(5000))?;
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn spectral_descent_inequality() -> Outcome {
    let mut cfg = single_seed(config(SPECTRAL), 5000);
    let problem = cfg.build_problem().map_err(|e| e.to_string())?;
    let l = problem.lipschitz_dual;
    let cap = thm31_eta_cap(l, 0.25).map_err(|e| e.to_string())?.eta;
    let eta = cap.min(1.0 / (2.0 * l));
    cfg.optimizer.schedule = None;
    cfg.optimizer.beta = Some(0.25);
    cfg.optimizer.eta = Some(eta);
    cfg.optimizer.batch_size = Some(1);
    let result = run_one(&cfg)?;
    let detail = clean(&result, CHECK_SPECTRAL_DESCENT, 4999)?;
    Ok(format!("eta {eta:.6}, {detail}"))
}

fn bound(text: &str, limit: Duration) -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = cmd_run(&config(text), dir.path()).map_err(|e| e.to_string())?;
    let b = report
        .bound
        .ok_or_else(|| format!("no bound report: {:?}", report.bound_note))?;
    let mut detail = format!(
        "lhs {:.4e} (se {:.2e}) <= rhs {:.4e}, {} seeds, T={}, B={}",
        b.lhs_empirical, b.lhs_std_error, b.rhs_explicit, b.seeds, b.horizon, b.batch
    );
    if let Some(c) = b.o_constant {
        detail.push_str(&format!(", implied constant {c:.3}"));
    }
    if !b.holds {
        return Err(detail.replace("<=", ">"));
    }
    within(start.elapsed(), limit, detail)
}

fn first_bound() -> Outcome {
    bound(BATCH_FREE, Duration::from_secs(300))
}

fn second_bound() -> Outcome {
    bound(SPECTRAL, Duration::from_secs(300))
}

fn rate_slopes() -> Outcome {
    let horizons = [100, 1000, 10_000];
    let clean_sweep = cmd_sweep(&config(DETERMINISTIC), &horizons, 1).map_err(|e| e.to_string())?;
    let mut noisy = config(BATCH_FREE);
    noisy.problem.sigma = 3.0;
    let noisy_sweep = cmd_sweep(&noisy, &horizons, 8).map_err(|e| e.to_string())?;
    let detail = format!(
        "noise-free slope {:.3} (<= -0.4), noise-dominated slope {:.3} (<= -0.15)",
        clean_sweep.slope, noisy_sweep.slope
    );
    if clean_sweep.slope <= -0.4 && noisy_sweep.slope <= -0.15 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn norm_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shapes = [
        (1, 1),
        (4, 3),
        (3, 4),
        (8, 8),
        (16, 2),
        (2, 16),
        (10, 7),
        (5, 12),
    ];
    let samples: Vec<Matrix> = (0..10_000)
        .map(|i| {
            let (m, n) = shapes[i % shapes.len()];
            Matrix::random_gaussian(m, n, &mut rng).scaled(10f64.powf(rng.random_range(-3.0..3.0)))
        })
        .collect();
    let report = check_norm_equivalence(&samples).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} samples, max ratio {:.4}",
        report.samples, report.max_ratio
    ))
}

fn gradients() -> Outcome {
    let mut parts = Vec::new();
    for p in problem_suite() {
        let mut worst: f64 = 0.0;
        for s in 0..100u64 {
            let gap = 0.25 + (s % 8) as f64 * 0.5;
            let x = p
                .initial_point(10_000 + s, gap)
                .map_err(|e| e.to_string())?;
            let g = p.exact_gradient(&x).map_err(|e| e.to_string())?;
            let fd = fd_gradient(|y| p.objective_value(y), &x, 1e-5);
            worst = worst.max(fro_dist(&g, &fd) / fro(&g));
        }
        if worst > 1e-6 {
            return Err(format!("{:?}: relative error {worst:.3e}", p.kind()));
        }
        parts.push(format!("{:?} {worst:.1e}", p.kind()));
    }
    Ok(format!("max relative error {}", parts.join(", ")))
}

fn determinism() -> Outcome {
    let cfg = config(BATCH_FREE);
    let mut texts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        cmd_run(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let files: Vec<Vec<u8>> = cfg
            .seed_list()
            .iter()
            .map(|&s| fs::read(dir.path().join(trace_file_name(s))).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        texts.push(files);
    }
    if texts[0] != texts[1] {
        return Err("trace files differ between runs".into());
    }
    Ok(format!(
        "{} trace files identical across two runs",
        texts[0].len()
    ))
}

fn newton_schulz() -> Outcome {
    let report = cmd_compare_orthogonalizers(&CompareOptions {
        shapes: vec![(32, 32)],
        conditions: vec![1.0, 10.0],
        ..CompareOptions::default()
    })
    .map_err(|e| e.to_string())?;
    let worst = report
        .rows
        .iter()
        .map(|r| r.max_deviation)
        .fold(0.0, f64::max);
    if worst > 1e-2 {
        return Err(format!("max deviation {worst:.3e} > 1e-2"));
    }
    let cfgs = muon_configs(5000).map(|mut c| {
        c.optimizer.orthogonalizer = OrthogonalizerKind::NewtonSchulz;
        c
    });
    let detail = lemma_runs(&cfgs)?;
    Ok(format!(
        "max deviation {worst:.3e} at condition <= 10; with NS: {detail}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("polar-factor optimality", polar_optimality),
        ("duality identity", duality),
        ("spectral-descent step identities", spectral_identities),
        ("Muon per-step descent inequality", lemma_descent),
        (
            "spectral-descent per-step inequality",
            spectral_descent_inequality,
        ),
        ("heavy-ball Muon explicit bound", first_bound),
        ("spectral-descent explicit bound", second_bound),
        ("rate slopes", rate_slopes),
        ("nuclear/Frobenius norm equivalence", norm_equivalence),
        ("gradient correctness", gradients),
        ("run determinism", determinism),
        ("Newton-Schulz fidelity", newton_schulz),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
