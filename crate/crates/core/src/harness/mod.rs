//! Experiment harness behind the `amp` binary.
//!
//! One JSON configuration document drives five subcommands: `se` solves the
//! asymptotic recursion and its fixed point, `construct` emits smoothed
//! loss/regularizer curve families, `run` and `sweep` drive the iterative
//! solvers over generated instances (with and without per-iteration
//! trajectories), and `selftest` runs the cross-module verification suites.
//! Every command writes `config.json` (the effective configuration, defaults
//! filled in) plus CSV/JSON results into its output directory, and identical
//! config+seed reproduces identical bytes.

mod commands;
mod config;
mod csvout;
mod selftest;

pub use commands::{
    cmd_construct, cmd_run, cmd_se, cmd_sweep, run_sweep, CellSummary, SweepOutput, SweepRecord,
    TrialTrajectory,
};
pub use config::{
    load_config, ConstructOptions, ExperimentConfig, SeOptions, SolverKind, TableOptions,
};
pub use selftest::{cmd_selftest, SelftestReport, SuiteResult};
