//! The selftest subcommand: cross-module verification suites with a
//! machine-readable verdict.
//!
//! Each suite compares a library route against an independent oracle route
//! (closed forms, local bisection, dense linear algebra, or a Monte Carlo
//! population). The suites read their numerical settings from the config, so
//! a corrupted tolerance shows up as a residual, not as silence.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::datagen::{generate_instance, GenConfig};
use crate::error::Result;
use crate::gamp::{
    make_mestimation_correctors, make_posterior_correctors, run_gamp, EngineOptions, GampState,
    LossFamily,
};
use crate::linalg::ridge_posterior;
use crate::models::{Channel, Prior};
use crate::optimal::{
    construct_loss_slice, construct_optimal_loss, construct_optimal_regularizer, roundtrip_check,
    verify_moreau_inversion,
};
use crate::scalar::{moreau_grad, Numerics, ScalarFunction};
use crate::se::{bamp_se_fixed_point, optimal_smoothing_params, se_trajectory, SeMethod};

use super::commands::{prepare_out, write_json};
use super::config::ExperimentConfig;

/// One named comparison inside a suite.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// One suite: passes when every check passed; `max_residual` is the largest
/// raw residual across its checks.
#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_residual: f64,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Checks(Vec<CheckResult>);

impl Checks {
    fn new() -> Self {
        Checks(Vec::new())
    }

    fn add(&mut self, name: impl Into<String>, residual: f64, tolerance: f64) {
        self.0.push(CheckResult {
            name: name.into(),
            residual,
            tolerance,
            passed: residual.is_finite() && residual <= tolerance,
        });
    }
}

fn finish(name: &'static str, outcome: Result<Checks>) -> SuiteResult {
    match outcome {
        Ok(Checks(checks)) => SuiteResult {
            name,
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            max_residual: checks.iter().map(|c| c.residual).fold(0.0, f64::max),
            checks,
        },
        Err(e) => SuiteResult {
            name,
            passed: false,
            max_residual: f64::MAX,
            checks: vec![CheckResult {
                name: format!("evaluation error: {e}"),
                residual: f64::MAX,
                tolerance: 0.0,
                passed: false,
            }],
        },
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn sigmoid_local(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Library route: the envelope gradient from the numerical root solve (no
/// closed-form prox attached), rearranged to a proximal point through the
/// gradient identity. Oracle route: closed-form proximal maps, or a local
/// bisection of the optimality equation for the logistic loss.
fn suite_prox_moreau(nu: &Numerics) -> Result<Checks> {
    type Oracle = Box<dyn Fn(f64, f64) -> f64>;
    let cases: Vec<(&str, ScalarFunction, Oracle)> = vec![
        (
            "abs",
            ScalarFunction::new(|x: f64| x.abs()).with_deriv(|x: f64| x.signum()),
            Box::new(|lambda, x: f64| x.signum() * (x.abs() - lambda).max(0.0)),
        ),
        (
            "quadratic",
            ScalarFunction::new(|x: f64| 0.5 * x * x).with_deriv(|x: f64| x),
            Box::new(|lambda, x| x / (1.0 + lambda)),
        ),
        (
            "huber",
            ScalarFunction::new(|x: f64| {
                if x.abs() <= 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            })
            .with_deriv(|x: f64| x.clamp(-1.0, 1.0)),
            Box::new(|lambda, x: f64| {
                if x.abs() <= 1.0 + lambda {
                    x / (1.0 + lambda)
                } else {
                    x - lambda * x.signum()
                }
            }),
        ),
        (
            "logistic_nll",
            ScalarFunction::logistic_nll(1.0),
            Box::new(|lambda, x| {
                // Root of (p - x)/lambda + sigmoid(p) - 1; the loss slope
                // lies in (-1, 0), so the root sits in [x, x + lambda].
                let g = |p: f64| (p - x) / lambda + sigmoid_local(p) - 1.0;
                let (mut lo, mut hi) = (x, x + lambda);
                for _ in 0..200 {
                    if hi - lo <= 1e-14 * hi.abs().max(1.0) {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    if g(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            }),
        ),
    ];
    let xs = grid(-10.0, 10.0, 201);
    let mut checks = Checks::new();
    for (name, f, oracle) in &cases {
        for &lambda in &[0.1, 1.0, 10.0] {
            let mut worst = 0.0f64;
            for &x in &xs {
                let g = moreau_grad(f, lambda, x, nu)?;
                worst = worst.max((oracle(lambda, x) - (x - lambda * g)).abs());
            }
            checks.add(format!("{name} lambda={lambda}"), worst, 1e-8);
        }
    }
    Ok(checks)
}

/// Envelope inversion: smooth, then deconvolve by the dual maximization, and
/// compare with the original function on a grid.
fn suite_moreau_inversion(nu: &Numerics) -> Result<Checks> {
    let cases: Vec<(&str, ScalarFunction)> = vec![
        ("quadratic", ScalarFunction::quadratic(0.0, 1.0)),
        ("abs", ScalarFunction::abs()),
        ("logistic_nll", ScalarFunction::logistic_nll(1.0)),
    ];
    let xs = grid(-8.0, 8.0, 81);
    let mut checks = Checks::new();
    for (name, f) in &cases {
        for &q in &[0.5, 2.0] {
            let rep = verify_moreau_inversion(f, q, &xs, nu)?;
            checks.add(format!("{name} q={q}"), rep.max_abs_err, 1e-4);
        }
    }
    Ok(checks)
}

/// Applying the envelope to each constructed table must give back the
/// negated smoothed log-density the table was built from.
fn suite_roundtrip(nu: &Numerics) -> Result<Checks> {
    let channel = Channel::logistic();
    let prior = Prior::laplace(1.0)?;
    let points = 801;
    let loss_hw = 12.0 * prior.variance().sqrt().max(1.0);
    let reg_hw = loss_hw;
    let mut checks = Checks::new();
    for &lambda in &[0.0, 2.0, 4.0, 6.0] {
        let slice = construct_loss_slice(&channel, 1.0, lambda, loss_hw, points, nu)?;
        let rep = roundtrip_check(&slice.table, lambda, &slice.psi, nu)?;
        checks.add(format!("logistic loss lambda={lambda}"), rep.residual, 1e-4);
    }
    for &lambda in &[0.0, 0.5, 1.0, 2.0] {
        let built = construct_optimal_regularizer(&prior, lambda, reg_hw, points, nu)?;
        let rep = roundtrip_check(&built.table, lambda, &built.psi, nu)?;
        checks.add(format!("laplace regularizer lambda={lambda}"), rep.residual, 1e-4);
    }
    Ok(checks)
}

/// With a Gaussian prior and a linear-Gaussian channel everything is exact:
/// the construction returns the unsmoothed quadratics, the asymptotic fixed
/// point solves a scalar equation, and the estimate is the ridge solution.
fn suite_gaussian_oracle(cfg: &ExperimentConfig) -> Result<Checks> {
    let nu = &cfg.numerics;
    let sigma_s2 = 1.0;
    let noise = 0.5;
    let gamma = 1.3;
    let alpha = 2.0;
    let prior = Prior::gaussian(sigma_s2)?;
    let channel = Channel::linear_gaussian(noise)?;
    let mut checks = Checks::new();

    // (a) Constructed tables reduce to the unsmoothed quadratics: the
    // smoothing is undone exactly for Gaussian models, whatever the level.
    let y0 = 0.3;
    let slice = construct_loss_slice(&channel, y0, 0.7, 12.0, 401, nu)?;
    let mut worst = 0.0f64;
    for &x in &grid(-6.0, 6.0, 41) {
        let want = (x - y0) * (x - y0) / (2.0 * noise);
        worst = worst.max((slice.table.eval(x) - want).abs());
    }
    checks.add("constructed loss is the quadratic nll", worst, 1e-6);

    let built = construct_optimal_regularizer(&prior, 0.8, 12.0, 401, nu)?;
    let mut worst = 0.0f64;
    for &x in &grid(-6.0, 6.0, 41) {
        let want = x * x / (2.0 * sigma_s2);
        worst = worst.max((built.table.eval(x) - want).abs());
    }
    checks.add("constructed regularizer is the quadratic prior", worst, 1e-6);

    // (b) Fixed point against a scalar bisection of
    // q_s = 1 / (1/sigma_s^2 + alpha gamma / (noise + gamma q_s)).
    let fp = bamp_se_fixed_point(
        &prior,
        &channel,
        alpha,
        gamma,
        cfg.se.tol,
        cfg.se.max_iters,
        nu,
        SeMethod::Quadrature,
    )?;
    let rhs = |q: f64| 1.0 / (1.0 / sigma_s2 + alpha * gamma / (noise + gamma * q));
    let (mut lo, mut hi) = (0.0, sigma_s2);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rhs(mid) > mid {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    checks.add("fixed point matches bisection", (fp.q_s - root).abs(), 1e-8);

    // (c) All three solvers against the dense ridge solution on one
    // generated instance.
    let gen = GenConfig {
        p: 32,
        alpha: 2.0,
        gamma,
        prior,
        channel,
        seed: cfg.seed,
    };
    let inst = generate_instance(&gen, 0)?;
    let oracle = ridge_posterior(&inst.x, &inst.y, noise, sigma_s2)?;
    let engine = EngineOptions {
        max_iters: 2000,
        tol: 1e-12,
        damping: 0.0,
    };
    let lambda_eta0 = gamma * sigma_s2;

    let max_dev = |s_hat: &[f64]| {
        s_hat
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };

    let map_loss = LossFamily::ChannelNll(channel);
    let map_reg = Arc::new(prior.neg_log_density_fn());
    let map = make_mestimation_correctors(map_loss, map_reg, nu);
    let run = run_gamp(&inst, &map, GampState::zero_start(32, 64, lambda_eta0)?, &engine)?;
    checks.add("map run matches ridge", max_dev(&run.state.s_hat), 1e-6);

    let sp = optimal_smoothing_params(&fp, gamma);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &y in &inst.y {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let pad = 0.2 * (y_hi - y_lo).max(1.0);
    let table = Arc::new(construct_optimal_loss(
        &channel,
        sp.lambda_eta,
        12.0,
        401,
        Some((y_lo - pad, y_hi + pad, 17)),
        nu,
    )?);
    let opt_reg = Arc::new(
        construct_optimal_regularizer(&prior, sp.lambda_h, 12.0, 401, nu)?
            .table
            .as_scalar_function(),
    );
    let optimal = make_mestimation_correctors(LossFamily::Tabulated(table), opt_reg, nu);
    let run = run_gamp(&inst, &optimal, GampState::zero_start(32, 64, lambda_eta0)?, &engine)?;
    checks.add("optimal run matches ridge", max_dev(&run.state.s_hat), 1e-6);

    let bayes = make_posterior_correctors(channel, prior, nu);
    let run = run_gamp(&inst, &bayes, GampState::zero_start(32, 64, lambda_eta0)?, &engine)?;
    checks.add("bamp run matches ridge", max_dev(&run.state.s_hat), 1e-6);

    Ok(checks)
}

/// Reduced tracking check: the posterior-mean engine's empirical error
/// moments, averaged over a few instances, follow the asymptotic recursion
/// for the first steps.
fn suite_se_tracking(cfg: &ExperimentConfig) -> Result<Checks> {
    let nu = &cfg.numerics;
    let prior = Prior::laplace(1.0)?;
    let channel = Channel::logistic();
    let (alpha, gamma) = (2.0, 1.0);
    let p = 500;
    let trials = 5u64;
    let steps = 5usize;

    // Records t = 0..steps-1 hold the pre-update error, the run's final
    // state supplies entry `steps`; together they line up with the first
    // steps + 1 recursion states.
    let states = se_trajectory(&prior, &channel, alpha, gamma, steps + 1, nu, SeMethod::Quadrature)?;
    let gen = GenConfig {
        p,
        alpha,
        gamma,
        prior,
        channel,
        seed: cfg.seed,
    };
    let correctors = make_posterior_correctors(channel, prior, nu);
    // The tolerance never fires within `steps` iterations, so every run
    // contributes exactly `steps` records; no damping, to match the
    // undamped recursion.
    let engine = EngineOptions {
        max_iters: steps,
        tol: 1e-300,
        damping: 0.0,
    };

    let mut sums = vec![0.0f64; steps + 1];
    for trial in 0..trials {
        let inst = generate_instance(&gen, trial)?;
        let init = GampState::zero_start(inst.p(), inst.n(), gamma * prior.variance())?;
        let run = run_gamp(&inst, &correctors, init, &engine)?;
        for (t, rec) in run.trajectory.iter().enumerate() {
            sums[t] += rec
                .q_s_emp
                .expect("generated instances carry the planted signal");
        }
        let s_true = inst.s_true.as_ref().expect("planted signal");
        let final_q: f64 = run
            .state
            .s_hat
            .iter()
            .zip(s_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p as f64;
        sums[steps] += final_q;
    }

    let mut checks = Checks::new();
    for (t, state) in states.iter().enumerate() {
        let mean = sums[t] / trials as f64;
        let rel = (mean - state.q_s).abs() / state.q_s;
        checks.add(format!("tracking t={t}"), rel, 0.15);
    }
    Ok(checks)
}

/// Runs every suite, writes `selftest_report.json`, and returns the report.
/// A failed suite is reported in the return value, not as an error; callers
/// decide what failure means for them.
pub fn cmd_selftest(cfg: &ExperimentConfig, out: &Path) -> Result<SelftestReport> {
    prepare_out(cfg, "selftest", out)?;
    let nu = &cfg.numerics;
    let suites = vec![
        finish("prox_moreau_identity", suite_prox_moreau(nu)),
        finish("moreau_inversion", suite_moreau_inversion(nu)),
        finish("construction_roundtrip", suite_roundtrip(nu)),
        finish("gaussian_gaussian_oracle", suite_gaussian_oracle(cfg)),
        finish("se_tracking", suite_se_tracking(cfg)),
    ];
    let report = SelftestReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    };
    write_json(out, "selftest_report.json", &report)?;
    Ok(report)
}
