//! The se, construct, run, and sweep subcommands as library functions.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::datagen::{generate_instance, GenConfig};
use crate::error::{AmpError, Result};
use crate::gamp::{
    make_mestimation_correctors, make_posterior_correctors, run_gamp, stationarity_residual,
    CorrectorPair, GampState, IterationRecord, LossFamily, ProblemInstance,
};
use crate::optimal::{construct_loss_slice, construct_optimal_loss, construct_optimal_regularizer};
use crate::scalar::ScalarFunction;
use crate::se::{bamp_se_fixed_point, optimal_smoothing_params, se_trajectory, SeState};

use super::config::{ExperimentConfig, SolverKind};
use super::csvout::{num, opt, Csv};

/// Discrete convexity slack shared with `TabulatedFunction`: second
/// differences of a convex construction stay above this under roundoff.
const CONVEXITY_TOL: f64 = -1e-7;

/// Shared command prologue: validate, check the declared mode, create the
/// output directory, and echo the effective configuration into it.
pub(super) fn prepare_out(cfg: &ExperimentConfig, subcommand: &str, out: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.check_mode(subcommand)?;
    fs::create_dir_all(out)?;
    let mut echo = serde_json::to_string_pretty(cfg)?;
    echo.push('\n');
    fs::write(out.join("config.json"), echo)?;
    Ok(())
}

pub(super) fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(out.join(name), text)?;
    Ok(())
}

// ----------------------------------------------------------------------
// se
// ----------------------------------------------------------------------

/// Tabulates the asymptotic recursion and its fixed point for every alpha:
/// `se_trajectory.csv` holds the tracked states (the smoothing-parameter
/// columns repeat q_eta and q_h, which the posterior-mean engine's running
/// parameters estimate), `se_fixed_point.csv` one row per alpha with the
/// tuned smoothing parameters and the predicted normalized MSE.
pub fn cmd_se(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, "se", out)?;
    let sigma_s2 = cfg.prior.variance();
    let mut traj = Csv::new(&["alpha", "t", "q_s", "q_eta", "q_h", "lambda_eta", "lambda_h"]);
    let mut fixed = Csv::new(&[
        "alpha",
        "iterations",
        "q_s",
        "q_eta",
        "q_h",
        "lambda_eta",
        "lambda_h",
        "mse_normalized",
    ]);
    for &alpha in &cfg.alphas {
        let states = se_trajectory(
            &cfg.prior,
            &cfg.channel,
            alpha,
            cfg.gamma,
            cfg.se.track_iters,
            &cfg.numerics,
            cfg.se.method,
        )?;
        for st in &states {
            traj.row(&[
                num(alpha),
                st.iteration.to_string(),
                num(st.q_s),
                num(st.q_eta),
                num(st.q_h),
                num(st.q_eta),
                num(st.q_h),
            ]);
        }
        let fp = bamp_se_fixed_point(
            &cfg.prior,
            &cfg.channel,
            alpha,
            cfg.gamma,
            cfg.se.tol,
            cfg.se.max_iters,
            &cfg.numerics,
            cfg.se.method,
        )?;
        let sp = optimal_smoothing_params(&fp, cfg.gamma);
        fixed.row(&[
            num(alpha),
            fp.iteration.to_string(),
            num(fp.q_s),
            num(fp.q_eta),
            num(fp.q_h),
            num(sp.lambda_eta),
            num(sp.lambda_h),
            num(fp.q_s / sigma_s2),
        ]);
    }
    fs::write(out.join("se_trajectory.csv"), traj.into_bytes())?;
    fs::write(out.join("se_fixed_point.csv"), fixed.into_bytes())?;
    Ok(())
}

// ----------------------------------------------------------------------
// construct
// ----------------------------------------------------------------------

#[derive(Serialize)]
struct CurveHealth {
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    /// Smallest 1/lambda + psi'' seen by the deconvolution screen; absent
    /// for lambda = 0 where no deconvolution happens.
    #[serde(skip_serializing_if = "Option::is_none")]
    curvature_margin: Option<f64>,
    min_second_difference: f64,
    convex: bool,
}

impl CurveHealth {
    fn new(lambda: f64, y: Option<f64>, report: &crate::optimal::ConstructionReport) -> Self {
        CurveHealth {
            lambda,
            y,
            curvature_margin: report.curvature_margin.is_finite().then_some(report.curvature_margin),
            min_second_difference: report.min_second_difference,
            convex: report.min_second_difference >= CONVEXITY_TOL,
        }
    }
}

#[derive(Serialize)]
struct ConstructSummary {
    all_convex: bool,
    loss_curves: Vec<CurveHealth>,
    regularizer_curves: Vec<CurveHealth>,
}

/// Emits the smoothed loss and regularizer curve families on a fixed x grid
/// (`loss_curves.csv`, `regularizer_curves.csv`) plus a convexity report
/// (`construct_summary.json`). Lambda 0 rows are the unsmoothed negative
/// log-likelihood / log-prior; all tables are anchored so their minimum is 0.
pub fn cmd_construct(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, "construct", out)?;
    let nu = &cfg.numerics;
    let sigma_s2 = cfg.prior.variance();
    let loss_hw = cfg.tables.half_width_factor * (cfg.gamma * sigma_s2).sqrt().max(1.0);
    let reg_hw = cfg.tables.half_width_factor * sigma_s2.sqrt().max(1.0);
    let c = &cfg.construct;
    let xs: Vec<f64> = (0..c.grid_points)
        .map(|i| -c.half_width + 2.0 * c.half_width * i as f64 / (c.grid_points - 1) as f64)
        .collect();

    let mut losses = Csv::new(&["y", "lambda", "x", "value", "derivative"]);
    let mut loss_health = Vec::new();
    for &y in &c.y_values {
        for &lambda in &c.loss_lambdas {
            let slice = construct_loss_slice(&cfg.channel, y, lambda, loss_hw, cfg.tables.points, nu)?;
            for &x in &xs {
                losses.row(&[
                    num(y),
                    num(lambda),
                    num(x),
                    num(slice.table.eval(x)),
                    num(slice.table.deriv(x)),
                ]);
            }
            loss_health.push(CurveHealth::new(lambda, Some(y), &slice.report));
        }
    }

    let mut regs = Csv::new(&["lambda", "x", "value", "derivative"]);
    let mut reg_health = Vec::new();
    for &lambda in &c.reg_lambdas {
        let built = construct_optimal_regularizer(&cfg.prior, lambda, reg_hw, cfg.tables.points, nu)?;
        for &x in &xs {
            regs.row(&[
                num(lambda),
                num(x),
                num(built.table.eval(x)),
                num(built.table.deriv(x)),
            ]);
        }
        reg_health.push(CurveHealth::new(lambda, None, &built.report));
    }

    let all_convex = loss_health.iter().chain(&reg_health).all(|h| h.convex);
    if !all_convex {
        log::warn!("a constructed curve failed the convexity check; see construct_summary.json");
    }
    fs::write(out.join("loss_curves.csv"), losses.into_bytes())?;
    fs::write(out.join("regularizer_curves.csv"), regs.into_bytes())?;
    write_json(
        out,
        "construct_summary.json",
        &ConstructSummary {
            all_convex,
            loss_curves: loss_health,
            regularizer_curves: reg_health,
        },
    )?;
    Ok(())
}

// ----------------------------------------------------------------------
// run / sweep
// ----------------------------------------------------------------------

/// One solver result on one generated instance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRecord {
    /// The configured measurement density of the cell (the realized value
    /// is n / p).
    pub alpha: f64,
    pub solver: SolverKind,
    pub trial: u64,
    /// Master seed the trial streams derive from.
    pub seed: u64,
    pub p: usize,
    pub n: usize,
    /// |s_hat - s_true|^2 / (P sigma_s^2); absent when the run diverged.
    pub mse_normalized: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// M-estimation solvers only: RMS estimating-equation residual at the
    /// final estimate.
    pub stationarity_residual: Option<f64>,
    /// Asymptotic normalized MSE from the fixed point; present for the
    /// solvers it predicts (optimal, bamp).
    pub se_prediction: Option<f64>,
}

/// Per-(alpha, solver) statistics over the converged trials.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CellSummary {
    pub alpha: f64,
    pub solver: SolverKind,
    pub trials: usize,
    pub converged_trials: usize,
    pub mean_mse_normalized: Option<f64>,
    /// Sample standard deviation (n-1 denominator) over converged trials.
    pub sd_mse_normalized: Option<f64>,
    /// Standard error of the mean.
    pub stderr_mse_normalized: Option<f64>,
    pub se_prediction: Option<f64>,
}

/// Per-iteration engine records of one trial, kept by `cmd_run`.
#[derive(Clone, Debug)]
pub struct TrialTrajectory {
    pub alpha: f64,
    pub solver: SolverKind,
    pub trial: u64,
    pub records: Vec<IterationRecord>,
}

pub struct SweepOutput {
    /// Sorted by (alpha, solver, trial).
    pub records: Vec<SweepRecord>,
    pub cells: Vec<CellSummary>,
    /// Empty unless trajectories were requested.
    pub trajectories: Vec<TrialTrajectory>,
}

/// Instance dimensions for one alpha: either the fixed-P override, or the
/// constant-work rule P = round(sqrt_np / sqrt(alpha)),
/// N = round(sqrt_np * sqrt(alpha)).
fn problem_size(cfg: &ExperimentConfig, alpha: f64) -> (usize, usize) {
    match cfg.p_fixed {
        Some(p) => (p, (alpha * p as f64).round().max(1.0) as usize),
        None => {
            let p = (cfg.sqrt_np / alpha.sqrt()).round().max(1.0) as usize;
            let n = (cfg.sqrt_np * alpha.sqrt()).round().max(1.0) as usize;
            (p, n)
        }
    }
}

/// Observed y range over every trial of the cell, for sizing the observation
/// grid of a continuous channel's loss table. Instances are regenerated from
/// their streams rather than held in memory.
fn observation_range(gen: &GenConfig, trials: u64) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for trial in 0..trials {
        let inst = generate_instance(gen, trial)?;
        for &y in &inst.y {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    Ok((lo, hi))
}

/// Everything needed to run one solver on instances of one cell.
struct SolverSetup {
    kind: SolverKind,
    correctors: CorrectorPair,
    /// The objective the run is measured against afterwards; None for the
    /// posterior-mean solver, which has no estimating equation.
    objective: Option<(LossFamily, Arc<ScalarFunction>)>,
    se_prediction: Option<f64>,
}

fn build_setups(
    cfg: &ExperimentConfig,
    alpha: f64,
    y_range: Option<(f64, f64)>,
) -> Result<Vec<SolverSetup>> {
    let nu = &cfg.numerics;
    let sigma_s2 = cfg.prior.variance();
    let needs_fp = cfg
        .solvers
        .iter()
        .any(|k| matches!(k, SolverKind::Optimal | SolverKind::Bamp));
    let fp: Option<SeState> = if needs_fp {
        Some(bamp_se_fixed_point(
            &cfg.prior,
            &cfg.channel,
            alpha,
            cfg.gamma,
            cfg.se.tol,
            cfg.se.max_iters,
            nu,
            cfg.se.method,
        )?)
    } else {
        None
    };
    let prediction = fp.as_ref().map(|f| f.q_s / sigma_s2);

    cfg.solvers
        .iter()
        .map(|&kind| {
            Ok(match kind {
                SolverKind::Map => {
                    let loss = LossFamily::ChannelNll(cfg.channel);
                    let reg = Arc::new(cfg.prior.neg_log_density_fn());
                    SolverSetup {
                        kind,
                        correctors: make_mestimation_correctors(loss.clone(), reg.clone(), nu),
                        objective: Some((loss, reg)),
                        se_prediction: None,
                    }
                }
                SolverKind::Optimal => {
                    let fp = fp.as_ref().expect("fixed point is solved when the optimal solver is requested");
                    let sp = optimal_smoothing_params(fp, cfg.gamma);
                    let loss_hw = cfg.tables.half_width_factor * (cfg.gamma * sigma_s2).sqrt().max(1.0);
                    let reg_hw = cfg.tables.half_width_factor * sigma_s2.sqrt().max(1.0);
                    let y_grid = match (cfg.channel.output_values(), y_range) {
                        (Some(_), _) => None,
                        (None, Some((lo, hi))) => {
                            let pad = cfg.tables.y_margin * (hi - lo).max(1.0);
                            Some((lo - pad, hi + pad, cfg.tables.y_grid_points))
                        }
                        (None, None) => {
                            return Err(AmpError::InvalidArgument(
                                "a continuous channel needs an observed y range to size the loss table".to_string(),
                            ))
                        }
                    };
                    let table = Arc::new(construct_optimal_loss(
                        &cfg.channel,
                        sp.lambda_eta,
                        loss_hw,
                        cfg.tables.points,
                        y_grid,
                        nu,
                    )?);
                    let reg = Arc::new(
                        construct_optimal_regularizer(&cfg.prior, sp.lambda_h, reg_hw, cfg.tables.points, nu)?
                            .table
                            .as_scalar_function(),
                    );
                    let loss = LossFamily::Tabulated(table);
                    SolverSetup {
                        kind,
                        correctors: make_mestimation_correctors(loss.clone(), reg.clone(), nu),
                        objective: Some((loss, reg)),
                        se_prediction: prediction,
                    }
                }
                SolverKind::Bamp => SolverSetup {
                    kind,
                    correctors: make_posterior_correctors(cfg.channel, cfg.prior, nu),
                    objective: None,
                    se_prediction: prediction,
                },
            })
        })
        .collect()
}

fn run_one(
    inst: &ProblemInstance,
    setup: &SolverSetup,
    cfg: &ExperimentConfig,
    alpha: f64,
    trial: u64,
) -> Result<(SweepRecord, Vec<IterationRecord>)> {
    let sigma_s2 = cfg.prior.variance();
    let init = GampState::zero_start(inst.p(), inst.n(), cfg.gamma * sigma_s2)?;
    let mut record = SweepRecord {
        alpha,
        solver: setup.kind,
        trial,
        seed: cfg.seed,
        p: inst.p(),
        n: inst.n(),
        mse_normalized: None,
        iterations: 0,
        converged: false,
        stationarity_residual: None,
        se_prediction: setup.se_prediction,
    };
    match run_gamp(inst, &setup.correctors, init, &cfg.engine) {
        Ok(run) => {
            record.iterations = run.trajectory.len();
            record.converged = run.converged;
            let s_true = inst
                .s_true
                .as_ref()
                .expect("generated instances carry the planted signal");
            let sq = run
                .state
                .s_hat
                .iter()
                .zip(s_true)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            record.mse_normalized = Some(sq / (inst.p() as f64 * sigma_s2));
            if let Some((loss, reg)) = &setup.objective {
                record.stationarity_residual = Some(stationarity_residual(
                    &run.state.s_hat,
                    inst,
                    loss,
                    reg,
                    &cfg.numerics,
                )?);
            }
            Ok((record, run.trajectory))
        }
        Err(AmpError::Diverged { iteration, detail }) => {
            log::warn!(
                "alpha {alpha} solver {} trial {trial}: diverged at iteration {iteration}: {detail}",
                setup.kind.name()
            );
            record.iterations = iteration;
            Ok((record, Vec::new()))
        }
        Err(e) => Err(e),
    }
}

/// Runs every configured solver on every (alpha, trial) instance. Solvers of
/// one trial share the instance; divergences become rows with
/// `converged = false` rather than aborting. Rows come back sorted by
/// (alpha, solver, trial).
pub fn run_sweep(cfg: &ExperimentConfig, keep_trajectories: bool) -> Result<SweepOutput> {
    cfg.validate()?;
    let mut records: Vec<SweepRecord> = Vec::new();
    let mut trajectories: Vec<TrialTrajectory> = Vec::new();
    for &alpha in &cfg.alphas {
        let (p, n) = problem_size(cfg, alpha);
        let gen = GenConfig {
            p,
            alpha: n as f64 / p as f64,
            gamma: cfg.gamma,
            prior: cfg.prior,
            channel: cfg.channel,
            seed: cfg.seed,
        };
        let needs_range = cfg.channel.output_values().is_none()
            && cfg.solvers.contains(&SolverKind::Optimal);
        let y_range = if needs_range {
            Some(observation_range(&gen, cfg.trials)?)
        } else {
            None
        };
        let setups = build_setups(cfg, alpha, y_range)?;
        for trial in 0..cfg.trials {
            let inst = generate_instance(&gen, trial)?;
            for setup in &setups {
                let (record, traj) = run_one(&inst, setup, cfg, alpha, trial)?;
                records.push(record);
                if keep_trajectories {
                    trajectories.push(TrialTrajectory {
                        alpha,
                        solver: setup.kind,
                        trial,
                        records: traj,
                    });
                }
            }
        }
    }
    fn order(
        a: (f64, SolverKind, u64),
        b: (f64, SolverKind, u64),
    ) -> std::cmp::Ordering {
        a.0.partial_cmp(&b.0)
            .expect("alphas are validated finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    }
    records.sort_by(|a, b| order((a.alpha, a.solver, a.trial), (b.alpha, b.solver, b.trial)));
    trajectories.sort_by(|a, b| order((a.alpha, a.solver, a.trial), (b.alpha, b.solver, b.trial)));
    let cells = summarize(&records);
    Ok(SweepOutput {
        records,
        cells,
        trajectories,
    })
}

fn summarize(records: &[SweepRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let first = records[i];
        let mut j = i;
        while j < records.len()
            && records[j].alpha == first.alpha
            && records[j].solver == first.solver
        {
            j += 1;
        }
        let group = &records[i..j];
        let vals: Vec<f64> = group
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| r.mse_normalized)
            .collect();
        let (mean, sd, stderr) = if vals.is_empty() {
            (None, None, None)
        } else {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            if vals.len() >= 2 {
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                let sd = var.sqrt();
                (Some(m), Some(sd), Some(sd / (vals.len() as f64).sqrt()))
            } else {
                (Some(m), None, None)
            }
        };
        cells.push(CellSummary {
            alpha: first.alpha,
            solver: first.solver,
            trials: group.len(),
            converged_trials: vals.len(),
            mean_mse_normalized: mean,
            sd_mse_normalized: sd,
            stderr_mse_normalized: stderr,
            se_prediction: first.se_prediction,
        });
        i = j;
    }
    cells
}

fn records_csv(records: &[SweepRecord]) -> Csv {
    let mut csv = Csv::new(&[
        "alpha",
        "solver",
        "trial",
        "seed",
        "p",
        "n",
        "mse_normalized",
        "iterations",
        "converged",
        "stationarity_residual",
        "se_prediction",
    ]);
    for r in records {
        csv.row(&[
            num(r.alpha),
            r.solver.name().to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.p.to_string(),
            r.n.to_string(),
            opt(r.mse_normalized),
            r.iterations.to_string(),
            r.converged.to_string(),
            opt(r.stationarity_residual),
            opt(r.se_prediction),
        ]);
    }
    csv
}

fn trajectories_csv(trajectories: &[TrialTrajectory]) -> Csv {
    let mut csv = Csv::new(&[
        "alpha",
        "solver",
        "trial",
        "t",
        "lambda_eta",
        "lambda_h",
        "q_s_emp",
        "q_eta_emp",
        "q_h_emp",
        "rel_change",
        "clamped",
    ]);
    for tr in trajectories {
        for r in &tr.records {
            csv.row(&[
                num(tr.alpha),
                tr.solver.name().to_string(),
                tr.trial.to_string(),
                r.t.to_string(),
                num(r.lambda_eta),
                num(r.lambda_h),
                opt(r.q_s_emp),
                opt(r.q_eta_emp),
                opt(r.q_h_emp),
                num(r.rel_change),
                r.clamped.to_string(),
            ]);
        }
    }
    csv
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    cells: &'a [CellSummary],
}

/// Comparison sweep: one record per (alpha, solver, trial) in
/// `sweep_records.csv`, per-cell statistics in `sweep_summary.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, "sweep", out)?;
    let output = run_sweep(cfg, false)?;
    fs::write(out.join("sweep_records.csv"), records_csv(&output.records).into_bytes())?;
    write_json(out, "sweep_summary.json", &SweepSummary { cells: &output.cells })?;
    Ok(())
}

/// Like `sweep` but additionally emits every per-iteration engine record to
/// `run_trajectories.csv`, for tracking runs against the asymptotic
/// recursion.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, "run", out)?;
    let output = run_sweep(cfg, true)?;
    fs::write(out.join("run_records.csv"), records_csv(&output.records).into_bytes())?;
    fs::write(
        out.join("run_trajectories.csv"),
        trajectories_csv(&output.trajectories).into_bytes(),
    )?;
    write_json(out, "run_summary.json", &SweepSummary { cells: &output.cells })?;
    Ok(())
}
