use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use muonlab::matrix::NewtonSchulz;
use muonlab::runner::{
    cmd_compare_orthogonalizers, cmd_run, cmd_sweep, cmd_verify, write_sweep_report,
    CompareOptions, ExitStatus, RunConfig, RunError, RUN_REPORT_FILE, VERIFY_REPORT_FILE,
};
use muonlab::schedules::{
    thm22_batch_free, thm22_big_batch, thm22_power_batch, thm31_eta_cap, ScheduleParams, Theorem,
};

#[derive(Parser)]
#[command(
    name = "muonlab",
    version,
    about = "Muon and spectral-descent experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config and write one trace per seed.
    Run(RunArgs),
    /// Re-check the traces in a run directory.
    Verify(VerifyArgs),
    /// Print the hyperparameters a convergence theorem prescribes.
    Schedule(ScheduleArgs),
    /// Run a config at several horizons and fit the rate slope.
    Sweep(SweepArgs),
    /// Compare Newton-Schulz against the exact polar factor.
    CompareOrthogonalizers(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use seeds 0..N instead of the config's seed list.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run directory written by `run`.
    #[arg(long, alias = "out")]
    dir: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    /// thm22-batch-free, thm22-big-batch, thm22-power-batch or thm31.
    #[arg(long)]
    theorem: String,
    /// Initial suboptimality bound R.
    #[arg(long = "r")]
    r: Option<f64>,
    /// Smoothness constant L.
    #[arg(long = "l")]
    l: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Column count n.
    #[arg(long = "n")]
    n: Option<usize>,
    /// Horizon T.
    #[arg(long = "t")]
    t: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated horizons, e.g. 100,1000,10000.
    #[arg(long, value_delimiter = ',', required = true)]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Directory for `sweep_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NsKind {
    Tuned,
    Cubic,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated shapes, e.g. 32x32,64x16.
    #[arg(long, value_delimiter = ',', default_value = "32x32", value_parser = parse_shape)]
    shapes: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10,1e6")]
    conditions: Vec<f64>,
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    #[arg(long, value_enum, default_value_t = NsKind::Tuned)]
    ns: NsKind,
    /// Iterations of the cubic variant.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s
        .split_once('x')
        .ok_or_else(|| format!("shape `{s}` is not of the form MxN"))?;
    let m: usize = m.parse().map_err(|_| format!("bad row count in `{s}`"))?;
    let n: usize = n
        .parse()
        .map_err(|_| format!("bad column count in `{s}`"))?;
    if m == 0 || n == 0 {
        return Err(format!("shape `{s}` has a zero dimension"));
    }
    Ok((m, n))
}

struct Failure {
    status: ExitStatus,
    message: String,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure {
            status: e.exit_status(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        status: ExitStatus::Usage,
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    RunConfig::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run(args: RunArgs) -> Result<ExitStatus, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(k) = args.seeds {
        cfg.set_seed_count(k);
    }
    if args.threads.is_some() {
        cfg.run.threads = args.threads;
    }
    cfg.validate()
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    let out = args
        .out
        .or_else(|| cfg.run.out_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set run.out_dir"))?;
    let report = cmd_run(&cfg, &out)?;
    for s in &report.seeds {
        let failed: Vec<&str> = s
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.check.as_str())
            .collect();
        println!(
            "seed {}: {:?}, {} steps{}",
            s.seed,
            s.status,
            s.steps,
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed checks: {}", failed.join(", "))
            }
        );
        if let Some(f) = &s.failure {
            println!("  {f}");
        }
    }
    print_bound(report.bound.as_ref(), report.bound_note.as_deref());
    println!("report: {}", out.join(RUN_REPORT_FILE).display());
    Ok(report.status)
}

fn print_bound(bound: Option<&muonlab::verifier::BoundReport>, note: Option<&str>) {
    if let Some(b) = bound {
        println!(
            "bound {}: lhs {:.6e} (se {:.2e}) rhs {:.6e} holds={}",
            b.theorem.name(),
            b.lhs_empirical,
            b.lhs_std_error,
            b.rhs_explicit,
            b.holds
        );
    }
    if let Some(n) = note {
        println!("{n}");
    }
}

fn verify(args: VerifyArgs) -> Result<ExitStatus, Failure> {
    let report = cmd_verify(&args.dir)?;
    for c in &report.checks {
        println!(
            "{}: {} checked, {} bypassed, {} violations",
            c.check, c.checked, c.bypassed, c.violations
        );
        if let Some(v) = &c.first_violation {
            println!("  first: {v}");
        }
    }
    print_bound(report.bound.as_ref(), report.bound_note.as_deref());
    println!("report: {}", args.dir.join(VERIFY_REPORT_FILE).display());
    Ok(report.status)
}

fn require<T>(v: Option<T>, flag: &str, theorem: Theorem) -> Result<T, Failure> {
    v.ok_or_else(|| usage(format!("--{flag} is required for {}", theorem.name())))
}

fn schedule(args: ScheduleArgs) -> Result<ExitStatus, Failure> {
    let theorem = Theorem::from_name(&args.theorem.replace('_', "-"))
        .ok_or_else(|| usage(format!("unknown theorem `{}`", args.theorem)))?;
    let params: ScheduleParams = match theorem {
        Theorem::Thm22BatchFree => thm22_batch_free(
            require(args.r, "r", theorem)?,
            require(args.l, "l", theorem)?,
            require(args.sigma, "sigma", theorem)?,
            require(args.n, "n", theorem)?,
            require(args.t, "t", theorem)?,
        ),
        Theorem::Thm22BigBatch => thm22_big_batch(
            require(args.r, "r", theorem)?,
            require(args.l, "l", theorem)?,
            require(args.n, "n", theorem)?,
            require(args.t, "t", theorem)?,
            require(args.beta, "beta", theorem)?,
        ),
        Theorem::Thm22PowerBatch => thm22_power_batch(
            require(args.r, "r", theorem)?,
            require(args.l, "l", theorem)?,
            require(args.n, "n", theorem)?,
            require(args.t, "t", theorem)?,
            require(args.beta, "beta", theorem)?,
            require(args.power, "power", theorem)?,
        ),
        Theorem::Thm31 => thm31_eta_cap(
            require(args.l, "l", theorem)?,
            require(args.beta, "beta", theorem)?,
        ),
    }
    .map_err(|e| usage(e.to_string()))?;
    print!("{}", params.to_text());
    Ok(ExitStatus::Success)
}

fn sweep(args: SweepArgs) -> Result<ExitStatus, Failure> {
    let cfg = load_config(&args.config)?;
    let report = cmd_sweep(&cfg, &args.horizons, args.seeds)?;
    println!(
        "{:>10} {:>14} {:>12} {:>6}",
        "T", "mean_grad", "std_error", "seeds"
    );
    for p in &report.points {
        println!(
            "{:>10} {:>14.6e} {:>12.4e} {:>6}",
            p.horizon, p.mean, p.std_error, p.seeds
        );
    }
    println!("slope = {}", report.slope);
    if let Some(dir) = args.out {
        let path = write_sweep_report(&dir, &report)?;
        println!("report: {}", path.display());
    }
    Ok(ExitStatus::Success)
}

fn compare(args: CompareArgs) -> Result<ExitStatus, Failure> {
    let newton_schulz = match args.ns {
        NsKind::Tuned => NewtonSchulz::tuned(),
        NsKind::Cubic => {
            NewtonSchulz::cubic(args.iterations).map_err(|e| usage(format!("--iterations: {e}")))?
        }
    };
    if args.trials == 0 {
        return Err(usage("--trials must be >= 1"));
    }
    let report = cmd_compare_orthogonalizers(&CompareOptions {
        shapes: args.shapes,
        trials: args.trials,
        conditions: args.conditions,
        tolerance: args.tolerance,
        seed: args.seed,
        newton_schulz,
    })?;
    println!(
        "newton-schulz iterations = {}, tolerance = {:e}",
        report.iterations, report.tolerance
    );
    print!("{}", report.to_table());
    Ok(ExitStatus::Success)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Schedule(a) => schedule(a),
        Command::Sweep(a) => sweep(a),
        Command::CompareOrthogonalizers(a) => compare(a),
    };
    let status = match result {
        Ok(s) => s,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.status
        }
    };
    ExitCode::from(status.code() as u8)
}
