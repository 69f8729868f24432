//! Experiment configuration for the command-line harness.
//!
//! A single JSON document drives every subcommand. All fields except the
//! model choices have defaults, and the effective configuration (defaults
//! filled in) is echoed into every output directory as `config.json` so a
//! result can always be traced back to the constants that produced it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::gamp::EngineOptions;
use crate::models::{Channel, Prior};
use crate::scalar::Numerics;
use crate::se::SeMethod;

/// Which solver a sweep row belongs to.
///
/// `Map` runs M-estimation with the raw negative log-likelihood and negative
/// log-prior. `Optimal` runs M-estimation with the constructed smoothed loss
/// and regularizer. `Bamp` runs the posterior-mean correctors directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Map,
    Optimal,
    Bamp,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Map => "map",
            SolverKind::Optimal => "optimal",
            SolverKind::Bamp => "bamp",
        }
    }
}

/// State-evolution solver options.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeOptions {
    /// Relative tolerance on the fixed-point error measure.
    pub tol: f64,
    /// Iteration cap for the damped fixed-point loop.
    pub max_iters: usize,
    /// How many recursion steps the `se` subcommand tabulates.
    pub track_iters: usize,
    /// Quadrature or Monte Carlo evaluation of the scalar expectations.
    pub method: SeMethod,
}

impl Default for SeOptions {
    fn default() -> Self {
        SeOptions {
            tol: 1e-10,
            max_iters: 2000,
            track_iters: 10,
            method: SeMethod::Quadrature,
        }
    }
}

/// Sizing of the lookup tables behind constructed losses and regularizers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableOptions {
    /// Grid points per tabulated slice.
    pub points: usize,
    /// Table half-width as a multiple of the relevant scale (see
    /// `default_loss_half_width` and `default_regularizer_half_width`).
    pub half_width_factor: f64,
    /// Number of observation slices for continuous channels.
    pub y_grid_points: usize,
    /// Fractional padding added to the observed y range on each side before
    /// placing the observation slices.
    pub y_margin: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            points: 2001,
            half_width_factor: 12.0,
            y_grid_points: 65,
            y_margin: 0.2,
        }
    }
}

/// What the `construct` subcommand emits.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructOptions {
    /// Smoothing levels for the loss curves (0 gives the unsmoothed
    /// negative log-likelihood).
    pub loss_lambdas: Vec<f64>,
    /// Smoothing levels for the regularizer curves (0 gives the
    /// unsmoothed negative log-prior).
    pub reg_lambdas: Vec<f64>,
    /// Observation values at which loss curves are evaluated.
    pub y_values: Vec<f64>,
    /// Points on the emitted x grid.
    pub grid_points: usize,
    /// Half-width of the emitted x grid.
    pub half_width: f64,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        ConstructOptions {
            loss_lambdas: vec![0.0, 2.0, 4.0, 6.0],
            reg_lambdas: vec![0.0, 0.5, 1.0, 2.0],
            y_values: vec![1.0],
            grid_points: 401,
            half_width: 8.0,
        }
    }
}

fn default_prior() -> Prior {
    Prior::laplace(1.0).expect("unit scale is valid")
}

fn default_channel() -> Channel {
    Channel::logistic()
}

fn default_alphas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0]
}

fn default_gamma() -> f64 {
    1.0
}

fn default_trials() -> u64 {
    20
}

fn default_solvers() -> Vec<SolverKind> {
    vec![SolverKind::Map, SolverKind::Optimal, SolverKind::Bamp]
}

fn default_sqrt_np() -> f64 {
    250.0
}

/// Configuration document shared by all subcommands.
///
/// Unknown keys are rejected so a typo cannot silently fall back to a
/// default. An empty document `{}` is valid and reproduces the default
/// logistic-channel, Laplace-prior comparison sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional statement of the intended subcommand. When present it must
    /// match the subcommand actually invoked; this guards against pointing
    /// a command at a config written for a different one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default = "default_prior")]
    pub prior: Prior,
    #[serde(default = "default_channel")]
    pub channel: Channel,
    /// Sampling ratios N/P to visit.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Row-norm scale of the design matrix: E ||x_mu||^2 = gamma.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Independent instances per (alpha, solver) cell.
    #[serde(default = "default_trials")]
    pub trials: u64,
    /// Master seed; trial k of any alpha derives its streams from (seed, k).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_solvers")]
    pub solvers: Vec<SolverKind>,
    /// Size rule for sweeps: P = round(sqrt_np / sqrt(alpha)),
    /// N = round(sqrt_np * sqrt(alpha)), so N*P is roughly constant
    /// across the sweep.
    #[serde(default = "default_sqrt_np")]
    pub sqrt_np: f64,
    /// Fixed signal dimension overriding the sqrt_np rule (used for
    /// trajectory-tracking runs where P must stay constant across alphas).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_fixed: Option<usize>,
    #[serde(default)]
    pub engine: EngineOptions,
    #[serde(default)]
    pub se: SeOptions,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub tables: TableOptions,
    #[serde(default)]
    pub construct: ConstructOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(AmpError::Config("alphas must not be empty".into()));
        }
        for &a in &self.alphas {
            if !a.is_finite() || a <= 0.0 {
                return Err(AmpError::Config(format!("alpha must be finite and positive, got {a}")));
            }
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(AmpError::Config(format!("gamma must be finite and positive, got {}", self.gamma)));
        }
        if self.trials == 0 {
            return Err(AmpError::Config("trials must be at least 1".into()));
        }
        if self.solvers.is_empty() {
            return Err(AmpError::Config("solvers must not be empty".into()));
        }
        let mut seen = self.solvers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.solvers.len() {
            return Err(AmpError::Config("solvers must not repeat".into()));
        }
        if !self.sqrt_np.is_finite() || self.sqrt_np < 2.0 {
            return Err(AmpError::Config(format!("sqrt_np must be at least 2, got {}", self.sqrt_np)));
        }
        if let Some(p) = self.p_fixed {
            if p == 0 {
                return Err(AmpError::Config("p_fixed must be at least 1".into()));
            }
        }
        self.engine.validate().map_err(|e| AmpError::Config(format!("engine: {e}")))?;
        if !self.se.tol.is_finite() || self.se.tol <= 0.0 {
            return Err(AmpError::Config(format!("se.tol must be positive, got {}", self.se.tol)));
        }
        if self.se.max_iters == 0 {
            return Err(AmpError::Config("se.max_iters must be at least 1".into()));
        }
        if let SeMethod::MonteCarlo { samples, .. } = self.se.method {
            if samples == 0 {
                return Err(AmpError::Config("se.method.samples must be at least 1".into()));
            }
        }
        if self.tables.points < 9 {
            return Err(AmpError::Config(format!("tables.points must be at least 9, got {}", self.tables.points)));
        }
        if !self.tables.half_width_factor.is_finite() || self.tables.half_width_factor <= 0.0 {
            return Err(AmpError::Config("tables.half_width_factor must be positive".into()));
        }
        if self.tables.y_grid_points < 2 {
            return Err(AmpError::Config("tables.y_grid_points must be at least 2".into()));
        }
        if !(self.tables.y_margin >= 0.0 && self.tables.y_margin.is_finite()) {
            return Err(AmpError::Config("tables.y_margin must be finite and non-negative".into()));
        }
        let c = &self.construct;
        if c.loss_lambdas.is_empty() && c.reg_lambdas.is_empty() {
            return Err(AmpError::Config("construct needs at least one smoothing level".into()));
        }
        for &l in c.loss_lambdas.iter().chain(&c.reg_lambdas) {
            if !l.is_finite() || l < 0.0 {
                return Err(AmpError::Config(format!("smoothing levels must be finite and non-negative, got {l}")));
            }
        }
        if c.y_values.is_empty() {
            return Err(AmpError::Config("construct.y_values must not be empty".into()));
        }
        if c.grid_points < 3 {
            return Err(AmpError::Config("construct.grid_points must be at least 3".into()));
        }
        if !c.half_width.is_finite() || c.half_width <= 0.0 {
            return Err(AmpError::Config("construct.half_width must be positive".into()));
        }
        self.numerics.validate().map_err(|e| AmpError::Config(format!("numerics: {e}")))?;
        Ok(())
    }

    /// Errors unless the config's `mode` field (when present) names the
    /// subcommand being run.
    pub fn check_mode(&self, subcommand: &str) -> Result<()> {
        match &self.mode {
            Some(m) if m != subcommand => Err(AmpError::Config(format!(
                "config declares mode \"{m}\" but the \"{subcommand}\" subcommand was invoked"
            ))),
            _ => Ok(()),
        }
    }
}

/// Reads, parses, and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| AmpError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| AmpError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_comparison_sweep() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.alphas, vec![0.5, 1.0, 2.0, 4.0]);
        assert_eq!(cfg.trials, 20);
        assert_eq!(cfg.solvers, vec![SolverKind::Map, SolverKind::Optimal, SolverKind::Bamp]);
        assert_eq!(cfg.sqrt_np, 250.0);
        assert!(matches!(cfg.channel, Channel::Logistic));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"trails\": 3}");
        assert!(err.is_err());
    }

    #[test]
    fn empty_alpha_list_is_a_config_error() {
        let cfg: ExperimentConfig = serde_json::from_str("{\"alphas\": []}").unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn mode_mismatch_is_a_config_error() {
        let cfg: ExperimentConfig = serde_json::from_str("{\"mode\": \"sweep\"}").unwrap();
        assert!(cfg.check_mode("sweep").is_ok());
        let err = cfg.check_mode("se").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn effective_config_round_trips_through_its_own_echo() {
        let cfg = ExperimentConfig::default();
        let echo = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(back.trials, cfg.trials);
        assert_eq!(back.tables.points, cfg.tables.points);
        assert_eq!(back.construct.loss_lambdas, cfg.construct.loss_lambdas);
    }
}
