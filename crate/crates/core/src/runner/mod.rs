//! Config-driven experiments: seeded runs in parallel, trace files, inline
//! and offline verification, horizon sweeps and orthogonalizer comparison.
//!
//! A run directory holds
//!
//! * `run.toml`: the config that produced it,
//! * `trace_seed_<s>.csv`: one [`trace::TraceFile`] per seed,
//! * `run_report.json`: inline check tallies and the bound report,
//! * `verify_report.json` after `verify`.

pub mod commands;
pub mod config;
pub mod trace;

pub use commands::{
    cmd_compare_orthogonalizers, cmd_run, cmd_sweep, cmd_verify, execute_seed, execute_seeds,
    trace_file_name, write_sweep_report, CompareOptions, CompareReport, CompareRow, ExitStatus,
    RunError, RunReport, SeedReport, SeedResult, SeedStatus, SweepReport, VerifyReport,
    RUN_CONFIG_FILE, RUN_REPORT_FILE, SWEEP_REPORT_FILE, VERIFY_REPORT_FILE,
};
pub use config::{ConfigError, ResolvedRun, RunConfig};
pub use trace::{TraceError, TraceFile};
