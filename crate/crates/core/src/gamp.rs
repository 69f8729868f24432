//! The message-passing iteration engine with pluggable scalar correctors.
//!
//! Two corrector families drive the same loop. The M-estimation pair applies
//! the envelope gradient of a loss on the output side and the proximal map
//! of a regularizer on the signal side; at zero smoothing this is plain MAP.
//! The posterior-mean pair applies the score of the Gaussian-smoothed
//! likelihood and the scalar posterior mean, targeting the Bayes estimate.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AmpError, Result};
use crate::linalg::DenseMatrix;
use crate::models::{Channel, Prior};
use crate::optimal::LossTable;
use crate::scalar::{
    gauss_posterior_moments, prior_posterior_moments, prox_with_deriv, Numerics, ScalarFunction,
};

/// Bounds applied to both smoothing parameters each step.
pub const LAMBDA_MIN: f64 = 1e-10;
pub const LAMBDA_MAX: f64 = 1e10;

/// A corrector output: the scalar value and its partial derivative in the
/// corrector's second argument (eta or h).
#[derive(Clone, Copy, Debug)]
pub struct GValue {
    pub value: f64,
    pub deriv: f64,
}

/// Which estimation family a corrector pair implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    /// Envelope gradient of a loss and proximal map of a regularizer.
    MEstimation,
    /// Score of the smoothed likelihood and scalar posterior mean.
    PosteriorMean,
}

/// A per-observation loss family: either a channel's negative log-likelihood
/// used directly (the MAP loss) or a constructed table.
#[derive(Clone)]
pub enum LossFamily {
    ChannelNll(Channel),
    Tabulated(Arc<LossTable>),
}

impl LossFamily {
    pub fn loss_fn(&self, y: f64) -> Result<ScalarFunction> {
        match self {
            LossFamily::ChannelNll(ch) => Ok(ch.neg_log_likelihood_fn(y)),
            LossFamily::Tabulated(t) => t.loss_fn(y),
        }
    }
}

type GyFn = dyn Fn(f64, f64, f64) -> Result<GValue> + Send + Sync;
type GsFn = dyn Fn(f64, f64) -> Result<GValue> + Send + Sync;

/// The two scalar corrector functions of one estimation family.
pub struct CorrectorPair {
    pub kind: CorrectorKind,
    g_y: Box<GyFn>,
    g_s: Box<GsFn>,
}

impl CorrectorPair {
    /// Output-side corrector at smoothing level `lambda_eta`.
    pub fn g_y(&self, lambda_eta: f64, y: f64, eta: f64) -> Result<GValue> {
        (self.g_y)(lambda_eta, y, eta)
    }

    /// Signal-side corrector at smoothing level `lambda_h`.
    pub fn g_s(&self, lambda_h: f64, h: f64) -> Result<GValue> {
        (self.g_s)(lambda_h, h)
    }
}

/// M-estimation correctors: the output corrector is the envelope gradient of
/// the loss at the running smoothing level, the signal corrector the
/// proximal map of the regularizer. Derivatives use the prox closed form
/// when one is attached, else the implicit-function formula.
pub fn make_mestimation_correctors(
    loss: LossFamily,
    reg: Arc<ScalarFunction>,
    nu: &Numerics,
) -> CorrectorPair {
    let nu_y = nu.clone();
    let nu_s = nu.clone();
    let g_y = Box::new(move |lambda: f64, y: f64, eta: f64| -> Result<GValue> {
        let f = loss.loss_fn(y)?;
        if lambda == 0.0 {
            return Ok(GValue {
                value: f.deriv_or_fd(eta, &nu_y),
                deriv: f.deriv2_or_fd(eta, &nu_y),
            });
        }
        let (p, dp) = prox_with_deriv(&f, lambda, eta, &nu_y)?;
        Ok(GValue {
            value: (eta - p) / lambda,
            deriv: (1.0 - dp) / lambda,
        })
    });
    let g_s = Box::new(move |lambda: f64, h: f64| -> Result<GValue> {
        let (p, dp) = prox_with_deriv(&reg, lambda, h, &nu_s)?;
        Ok(GValue {
            value: p,
            deriv: dp,
        })
    });
    CorrectorPair {
        kind: CorrectorKind::MEstimation,
        g_y,
        g_s,
    }
}

/// Posterior-mean correctors: the output corrector is the score of the
/// Gaussian-smoothed likelihood, the signal corrector the posterior mean of
/// the prior under a Gaussian observation of variance `lambda_h`.
pub fn make_posterior_correctors(
    channel: Channel,
    prior: Prior,
    nu: &Numerics,
) -> CorrectorPair {
    let nu_y = nu.clone();
    let nu_s = nu.clone();
    let g_y = Box::new(move |lambda: f64, y: f64, eta: f64| -> Result<GValue> {
        if lambda == 0.0 {
            let f = channel.neg_log_likelihood_fn(y);
            return Ok(GValue {
                value: f.deriv_or_fd(eta, &nu_y),
                deriv: f.deriv2_or_fd(eta, &nu_y),
            });
        }
        let m = gauss_posterior_moments(&|z| channel.log_likelihood(y, z), lambda, eta, &nu_y)?;
        Ok(GValue {
            value: (eta - m.mean) / lambda,
            deriv: (lambda - m.var) / (lambda * lambda),
        })
    });
    let g_s = Box::new(move |lambda: f64, h: f64| -> Result<GValue> {
        if lambda == 0.0 {
            return Ok(GValue {
                value: h,
                deriv: 1.0,
            });
        }
        let m = prior_posterior_moments(&prior, lambda, h, &nu_s)?;
        Ok(GValue {
            value: m.mean,
            deriv: m.var / lambda,
        })
    });
    CorrectorPair {
        kind: CorrectorKind::PosteriorMean,
        g_y,
        g_s,
    }
}

/// One generalized-linear estimation problem: y observed through a channel
/// applied to X s with X of size N x P.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub gamma: f64,
    /// N / P, stored exactly.
    pub alpha: f64,
    /// Ground-truth signal, for diagnostics only.
    pub s_true: Option<Vec<f64>>,
    /// X s_true, cached for per-iteration residual diagnostics.
    z_true: Option<Vec<f64>>,
}

impl ProblemInstance {
    pub fn new(
        x: DenseMatrix,
        y: Vec<f64>,
        gamma: f64,
        s_true: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (n, p) = (x.rows(), x.cols());
        if n == 0 || p == 0 {
            return Err(AmpError::InvalidArgument(
                "an instance needs at least one row and one column".to_string(),
            ));
        }
        if y.len() != n {
            return Err(AmpError::InvalidArgument(format!(
                "y has length {} but X has {} rows",
                y.len(),
                n
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if let Some(s) = &s_true {
            if s.len() != p {
                return Err(AmpError::InvalidArgument(format!(
                    "s_true has length {} but X has {} columns",
                    s.len(),
                    p
                )));
            }
        }
        let z_true = s_true.as_ref().map(|s| x.matvec(s));
        Ok(ProblemInstance {
            alpha: n as f64 / p as f64,
            x,
            y,
            gamma,
            s_true,
            z_true,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }
}

/// The rolling iteration state.
///
/// With `iteration = t` (number of completed steps) the fields hold the
/// current estimate `s_hat` entering step t, the linear-stage vector `eta`
/// produced by the last completed step along with `lambda_eta_prev`, the
/// smoothing level it was corrected at (the memory term needs both), the
/// one-older `eta_prev` for inspection, the current output smoothing level
/// `lambda_eta`, and the signal smoothing level `lambda_h` from the last
/// completed step (zero before the first).
#[derive(Clone, Debug)]
pub struct GampState {
    pub s_hat: Vec<f64>,
    pub eta: Vec<f64>,
    pub eta_prev: Vec<f64>,
    pub lambda_eta: f64,
    pub lambda_eta_prev: f64,
    pub lambda_h: f64,
    pub iteration: usize,
}

impl GampState {
    /// The standard zero start: s_hat = 0 with the output smoothing level set
    /// to the variance of the zero estimate's residual, gamma * sigma_s^2.
    pub fn zero_start(p: usize, n: usize, lambda_eta0: f64) -> Result<Self> {
        if !(lambda_eta0.is_finite() && lambda_eta0 > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "initial smoothing level must be positive, got {lambda_eta0}"
            )));
        }
        Ok(GampState {
            s_hat: vec![0.0; p],
            eta: vec![0.0; n],
            eta_prev: vec![0.0; n],
            lambda_eta: lambda_eta0,
            lambda_eta_prev: lambda_eta0,
            lambda_h: 0.0,
            iteration: 0,
        })
    }
}

/// Per-iteration scalar summary emitted by every step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationRecord {
    /// Step index t; the empirical moments below are aligned with the
    /// recursion index (q_s uses the estimate entering the step).
    pub t: usize,
    /// Output smoothing level used in this step.
    pub lambda_eta: f64,
    /// Signal smoothing level computed in this step.
    pub lambda_h: f64,
    /// |s_hat^t - s_true|^2 / P (None without ground truth).
    pub q_s_emp: Option<f64>,
    /// |eta^t - X s_true|^2 / N.
    pub q_eta_emp: Option<f64>,
    /// |h^t - s_true|^2 / P.
    pub q_h_emp: Option<f64>,
    /// |s_hat^{t+1} - s_hat^t| / max(1, |s_hat^t|).
    pub rel_change: f64,
    /// Whether a smoothing parameter hit its clamp this step.
    pub clamped: bool,
}

fn clamp_lambda(v: f64, what: &str, t: usize, clamped: &mut bool) -> Result<f64> {
    if v.is_nan() {
        return Err(AmpError::Diverged {
            iteration: t,
            detail: format!("{what} became NaN"),
        });
    }
    if (LAMBDA_MIN..=LAMBDA_MAX).contains(&v) {
        return Ok(v);
    }
    let c = v.clamp(LAMBDA_MIN, LAMBDA_MAX);
    log::warn!("iteration {t}: {what} = {v:.3e} clamped to {c:.3e}");
    *clamped = true;
    Ok(c)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn mean_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// One synchronous update, in order: (a) the linear stage eta with the
/// memory corrector evaluated at the previous smoothing level and eta,
/// (b) the signal smoothing level from the output corrector derivatives,
/// (c) the effective observation h, (d) the new estimate from the signal
/// corrector with iterate averaging `damping`, (e) the next output
/// smoothing level from the signal corrector derivatives.
pub fn gamp_step(
    state: &GampState,
    inst: &ProblemInstance,
    c: &CorrectorPair,
    damping: f64,
) -> Result<(GampState, IterationRecord)> {
    let n = inst.n();
    let p = inst.p();
    let t = state.iteration;

    // (a) linear stage with the memory term (dropped on the first step).
    let x_s = inst.x.matvec(&state.s_hat);
    let eta: Vec<f64> = if t == 0 {
        x_s
    } else {
        let mem: Vec<GValue> = (0..n)
            .into_par_iter()
            .map(|i| c.g_y(state.lambda_eta_prev, inst.y[i], state.eta[i]))
            .collect::<Result<Vec<_>>>()?;
        (0..n)
            .map(|i| x_s[i] + state.lambda_eta * mem[i].value)
            .collect()
    };

    // (b) output corrector at the current smoothing level.
    let gy: Vec<GValue> = (0..n)
        .into_par_iter()
        .map(|i| c.g_y(state.lambda_eta, inst.y[i], eta[i]))
        .collect::<Result<Vec<_>>>()?;
    let sum_dy: f64 = gy.iter().map(|g| g.deriv).sum();
    let mut clamped = false;
    let lambda_h = clamp_lambda(
        1.0 / (inst.gamma * inst.alpha / n as f64 * sum_dy),
        "lambda_h",
        t,
        &mut clamped,
    )?;

    // (c) effective observation of the signal.
    let gy_values: Vec<f64> = gy.iter().map(|g| g.value).collect();
    let xt_g = inst.x.t_matvec(&gy_values);
    let h: Vec<f64> = (0..p)
        .map(|j| state.s_hat[j] - lambda_h * xt_g[j])
        .collect();

    // (d) signal corrector and iterate averaging.
    let gs: Vec<GValue> = (0..p)
        .into_par_iter()
        .map(|j| c.g_s(lambda_h, h[j]))
        .collect::<Result<Vec<_>>>()?;
    let s_hat: Vec<f64> = (0..p)
        .map(|j| (1.0 - damping) * gs[j].value + damping * state.s_hat[j])
        .collect();

    // (e) next output smoothing level.
    let sum_dh: f64 = gs.iter().map(|g| g.deriv).sum();
    let lambda_eta_next = clamp_lambda(
        inst.gamma * lambda_h / p as f64 * sum_dh,
        "lambda_eta",
        t,
        &mut clamped,
    )?;

    if !(norm_sq(&s_hat).is_finite() && norm_sq(&eta).is_finite()) {
        return Err(AmpError::Diverged {
            iteration: t,
            detail: "iterate became non-finite".to_string(),
        });
    }

    let rel_change =
        (mean_sq_dist(&s_hat, &state.s_hat) * p as f64).sqrt() / norm_sq(&state.s_hat).sqrt().max(1.0);
    let record = IterationRecord {
        t,
        lambda_eta: state.lambda_eta,
        lambda_h,
        q_s_emp: inst.s_true.as_ref().map(|s| mean_sq_dist(&state.s_hat, s)),
        q_eta_emp: inst.z_true.as_ref().map(|z| mean_sq_dist(&eta, z)),
        q_h_emp: inst.s_true.as_ref().map(|s| mean_sq_dist(&h, s)),
        rel_change,
        clamped,
    };
    let next = GampState {
        s_hat,
        eta_prev: state.eta.clone(),
        eta,
        lambda_eta: lambda_eta_next,
        lambda_eta_prev: state.lambda_eta,
        lambda_h,
        iteration: t + 1,
    };
    Ok((next, record))
}

/// Stopping and damping configuration for a full run.
#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOptions {
    pub max_iters: usize,
    /// Relative change of s_hat below which the run stops.
    pub tol: f64,
    /// Iterate-averaging weight on the previous estimate (0 disables).
    pub damping: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_iters: 1000,
            tol: 1e-8,
            damping: 0.2,
        }
    }
}

impl EngineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(AmpError::InvalidArgument(
                "max_iters must be at least 1".to_string(),
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(AmpError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(AmpError::InvalidArgument(format!(
                "damping must be in [0, 1), got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// A completed run: the final state, per-iteration records, and whether the
/// stopping tolerance was reached (exhausting max_iters is not an error).
#[derive(Debug)]
pub struct GampRun {
    pub state: GampState,
    pub trajectory: Vec<IterationRecord>,
    pub converged: bool,
}

pub fn run_gamp(
    inst: &ProblemInstance,
    c: &CorrectorPair,
    init: GampState,
    opts: &EngineOptions,
) -> Result<GampRun> {
    opts.validate()?;
    let mut state = init;
    let mut trajectory = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let (next, record) = gamp_step(&state, inst, c, opts.damping)?;
        trajectory.push(record);
        state = next;
        if record.rel_change <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(GampRun {
        state,
        trajectory,
        converged,
    })
}

/// Root-mean-square of the estimating-equation residual
/// X^T loss'(y, X s) + reg'(s), with the subgradient element chosen
/// coordinate-wise to minimize the residual at regularizer kinks. Small at
/// any local minimum of the regularized M-estimation objective.
pub fn stationarity_residual(
    s_hat: &[f64],
    inst: &ProblemInstance,
    loss: &LossFamily,
    reg: &ScalarFunction,
    nu: &Numerics,
) -> Result<f64> {
    if s_hat.len() != inst.p() {
        return Err(AmpError::InvalidArgument(format!(
            "estimate has length {} but X has {} columns",
            s_hat.len(),
            inst.p()
        )));
    }
    let u = inst.x.matvec(s_hat);
    let d: Vec<f64> = (0..inst.n())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let f = loss.loss_fn(inst.y[i])?;
            Ok(f.deriv_or_fd(u[i], nu))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = inst.x.t_matvec(&d);
    let mut sum = 0.0;
    for (j, &vj) in v.iter().enumerate() {
        let (lo, hi) = reg.subgrad_range(s_hat[j], nu);
        let g = (-vj).clamp(lo, hi);
        let r = vj + g;
        sum += r * r;
    }
    Ok((sum / s_hat.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ridge_posterior;
    use crate::rng::{stream, StreamRole};
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn nu() -> Numerics {
        Numerics::default()
    }

    /// A small linear-Gaussian instance with known signal.
    fn small_instance(
        seed: u64,
        n: usize,
        p: usize,
        gamma: f64,
        sigma_s2: f64,
        noise_var: f64,
    ) -> ProblemInstance {
        let mut mrng = stream(seed, 0, StreamRole::Matrix);
        let x = DenseMatrix::gaussian(n, p, (gamma / p as f64).sqrt(), &mut mrng);
        let mut srng = stream(seed, 0, StreamRole::Signal);
        let s: Vec<f64> = (0..p)
            .map(|_| sigma_s2.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut srng))
            .collect();
        let mut crng = stream(seed, 0, StreamRole::Channel);
        let z = x.matvec(&s);
        let y: Vec<f64> = z
            .iter()
            .map(|zi| {
                zi + noise_var.sqrt()
                    * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut crng)
            })
            .collect();
        ProblemInstance::new(x, y, gamma, Some(s)).unwrap()
    }

    #[test]
    fn soft_threshold_is_the_signal_corrector_of_the_abs_regularizer() {
        let c = make_mestimation_correctors(
            LossFamily::ChannelNll(Channel::logistic()),
            Arc::new(ScalarFunction::abs()),
            &nu(),
        );
        let g = c.g_s(1.0, 3.0).unwrap();
        assert_abs_diff_eq!(g.value, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.deriv, 1.0, epsilon = 1e-12);
        let g0 = c.g_s(1.0, 0.5).unwrap();
        assert_abs_diff_eq!(g0.value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g0.deriv, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_loss_output_corrector_matches_the_closed_form() {
        let ch = Channel::linear_gaussian(1.0).unwrap();
        let c = make_mestimation_correctors(
            LossFamily::ChannelNll(ch),
            Arc::new(ScalarFunction::zero()),
            &nu(),
        );
        for &(lambda, y, eta) in &[(0.5, 1.0, 3.0), (2.0, -1.0, 0.3), (0.0, 2.0, 2.5)] {
            let g = c.g_y(lambda, y, eta).unwrap();
            assert_abs_diff_eq!(g.value, (eta - y) / (1.0 + lambda), epsilon = 1e-9);
            assert_abs_diff_eq!(g.deriv, 1.0 / (1.0 + lambda), epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_regularizer_gives_the_identity_signal_corrector() {
        let c = make_mestimation_correctors(
            LossFamily::ChannelNll(Channel::logistic()),
            Arc::new(ScalarFunction::zero()),
            &nu(),
        );
        let g = c.g_s(2.5, -1.7).unwrap();
        assert_abs_diff_eq!(g.value, -1.7, epsilon = 1e-10);
        assert_abs_diff_eq!(g.deriv, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn posterior_correctors_match_closed_forms_for_gaussian_models() {
        let c = make_posterior_correctors(
            Channel::linear_gaussian(0.7).unwrap(),
            Prior::gaussian(1.5).unwrap(),
            &nu(),
        );
        // Output side: score of a Gaussian with variance 0.7 + lambda.
        let g = c.g_y(0.9, 1.2, -0.4).unwrap();
        assert_abs_diff_eq!(g.value, (-0.4 - 1.2) / (0.7 + 0.9), epsilon = 1e-8);
        assert_abs_diff_eq!(g.deriv, 1.0 / (0.7 + 0.9), epsilon = 1e-8);
        // Signal side: Gaussian conjugacy.
        let g = c.g_s(0.5, 2.0).unwrap();
        assert_abs_diff_eq!(g.value, 2.0 * 1.5 / (1.5 + 0.5), epsilon = 1e-8);
        assert_abs_diff_eq!(g.deriv, (1.5 * 0.5 / (1.5 + 0.5)) / 0.5, epsilon = 1e-8);
    }

    #[test]
    fn logistic_output_corrector_at_zero_smoothing_is_the_raw_score() {
        let c = make_posterior_correctors(
            Channel::logistic(),
            Prior::gaussian(1.0).unwrap(),
            &nu(),
        );
        for &eta in &[-2.0, 0.0, 1.3] {
            let g = c.g_y(0.0, 1.0, eta).unwrap();
            let sig = 1.0 / (1.0 + (-eta).exp());
            assert_abs_diff_eq!(g.value, sig - 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn laplace_posterior_signal_corrector_matches_frozen_value() {
        let c = make_posterior_correctors(
            Channel::logistic(),
            Prior::laplace(1.0).unwrap(),
            &nu(),
        );
        let g = c.g_s(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(g.value, 1.1610889078431386, epsilon = 1e-8);
    }

    #[test]
    fn corrector_derivatives_match_central_differences() {
        let table = crate::optimal::construct_optimal_loss(
            &Channel::logistic(),
            1.5,
            10.0,
            801,
            None,
            &nu(),
        )
        .unwrap();
        // The FD step of 1e-5 resolves the derivative only if the prox
        // solves underneath are accurate well past that, so tighten the
        // solver tolerance for this comparison.
        let tight = Numerics {
            prox_tol: 1e-13,
            ..Numerics::default()
        };
        let pairs: Vec<CorrectorPair> = vec![
            make_mestimation_correctors(
                LossFamily::ChannelNll(Channel::logistic()),
                Arc::new(ScalarFunction::quadratic(0.0, 0.8)),
                &tight,
            ),
            make_mestimation_correctors(
                LossFamily::Tabulated(Arc::new(table)),
                Arc::new(ScalarFunction::abs()),
                &tight,
            ),
            make_posterior_correctors(
                Channel::logistic(),
                Prior::laplace(1.0).unwrap(),
                &tight,
            ),
        ];
        let fd = 1e-5;
        for c in &pairs {
            for &lambda in &[0.4, 1.7] {
                for &y in &[0.0, 1.0] {
                    for &eta in &[-2.3, 0.37, 1.9] {
                        let g = c.g_y(lambda, y, eta).unwrap();
                        let vp = c.g_y(lambda, y, eta + fd).unwrap().value;
                        let vm = c.g_y(lambda, y, eta - fd).unwrap().value;
                        let num = (vp - vm) / (2.0 * fd);
                        let scale = num.abs().max(g.deriv.abs()).max(1e-3);
                        assert!(
                            (g.deriv - num).abs() / scale <= 1e-5,
                            "g_y deriv mismatch: {} vs {num} at lambda={lambda}, y={y}, eta={eta}",
                            g.deriv
                        );
                    }
                }
                // Signal side, avoiding the soft-threshold corner points.
                for &h in &[-3.1, -0.2, 0.9, 2.6] {
                    let g = c.g_s(lambda, h).unwrap();
                    let vp = c.g_s(lambda, h + fd).unwrap().value;
                    let vm = c.g_s(lambda, h - fd).unwrap().value;
                    let num = (vp - vm) / (2.0 * fd);
                    let scale = num.abs().max(g.deriv.abs()).max(1e-3);
                    assert!(
                        (g.deriv - num).abs() / scale <= 1e-5,
                        "g_s deriv mismatch: {} vs {num} at lambda={lambda}, h={h}",
                        g.deriv
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_output_corrector_isolates_the_wiring() {
        // With G_y = 0 the linear stage is X s_hat and the new estimate is
        // G_s applied to the old one (h = s_hat when the output term vanishes).
        let c = CorrectorPair {
            kind: CorrectorKind::MEstimation,
            g_y: Box::new(|_, _, _| {
                Ok(GValue {
                    value: 0.0,
                    deriv: 1.0,
                })
            }),
            g_s: Box::new(|_, h| {
                Ok(GValue {
                    value: 0.5 * h,
                    deriv: 0.5,
                })
            }),
        };
        let inst = small_instance(7, 8, 4, 1.0, 1.0, 0.1);
        let mut init = GampState::zero_start(4, 8, 1.0).unwrap();
        init.s_hat = vec![1.0, -2.0, 0.5, 3.0];
        let (next, _) = gamp_step(&init, &inst, &c, 0.0).unwrap();
        let expect_eta = inst.x.matvec(&init.s_hat);
        for (a, b) in next.eta.iter().zip(&expect_eta) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
        }
        for (a, b) in next.s_hat.iter().zip(&init.s_hat) {
            assert_abs_diff_eq!(*a, 0.5 * b, epsilon = 1e-14);
        }
    }

    #[test]
    fn gaussian_gaussian_run_matches_the_ridge_oracle() {
        let sigma_s2 = 1.0;
        let noise = 0.5;
        let inst = small_instance(11, 8, 4, 1.0, sigma_s2, noise);
        let oracle = ridge_posterior(&inst.x, &inst.y, noise, sigma_s2).unwrap();
        let opts = EngineOptions {
            max_iters: 500,
            tol: 1e-12,
            damping: 0.0,
        };
        // Posterior-mean correctors.
        let c = make_posterior_correctors(
            Channel::linear_gaussian(noise).unwrap(),
            Prior::gaussian(sigma_s2).unwrap(),
            &nu(),
        );
        let init = GampState::zero_start(4, 8, 1.0 * sigma_s2).unwrap();
        let run = run_gamp(&inst, &c, init.clone(), &opts).unwrap();
        assert!(run.converged);
        for (a, b) in run.state.s_hat.iter().zip(&oracle) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
        // M-estimation correctors with the exact quadratic loss and the true
        // negative log-prior as regularizer reach the same point.
        let reg = ScalarFunction::quadratic(0.0, 1.0 / sigma_s2);
        let c = make_mestimation_correctors(
            LossFamily::ChannelNll(Channel::linear_gaussian(noise).unwrap()),
            Arc::new(reg),
            &nu(),
        );
        let run = run_gamp(&inst, &c, init, &opts).unwrap();
        assert!(run.converged);
        for (a, b) in run.state.s_hat.iter().zip(&oracle) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn one_step_from_the_oracle_fixed_point_stays_put() {
        let sigma_s2 = 1.2;
        let noise = 0.4;
        let inst = small_instance(13, 10, 5, 1.0, sigma_s2, noise);
        let oracle = ridge_posterior(&inst.x, &inst.y, noise, sigma_s2).unwrap();
        // The linear stage's fixed point solves eta = X s + lambda_eta * G_y
        // with G_y = (eta - y) / (noise + lambda_eta), which rearranges to
        // eta = ((noise + lambda_eta) X s - lambda_eta y) / noise.
        let lambda_eta = 0.8;
        let xs = inst.x.matvec(&oracle);
        let eta: Vec<f64> = xs
            .iter()
            .zip(&inst.y)
            .map(|(z, y)| ((noise + lambda_eta) * z - lambda_eta * y) / noise)
            .collect();
        let state = GampState {
            s_hat: oracle.clone(),
            eta_prev: vec![0.0; inst.n()],
            eta,
            lambda_eta,
            lambda_eta_prev: lambda_eta,
            lambda_h: 0.3,
            iteration: 1,
        };
        let c = make_posterior_correctors(
            Channel::linear_gaussian(noise).unwrap(),
            Prior::gaussian(sigma_s2).unwrap(),
            &nu(),
        );
        let (next, record) = gamp_step(&state, &inst, &c, 0.0).unwrap();
        let moved = next
            .s_hat
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(moved <= 1e-8, "estimate moved {moved} from the fixed point");
        assert!(record.rel_change <= 1e-8);
    }

    #[test]
    fn permuting_signal_coordinates_permutes_the_estimate() {
        let inst = small_instance(17, 12, 6, 1.0, 1.0, 0.3);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = vec![0.0; inst.n() * inst.p()];
        for i in 0..inst.n() {
            for (jp, &j) in perm.iter().enumerate() {
                xp[i * inst.p() + jp] = inst.x.get(i, j);
            }
        }
        let xp = DenseMatrix::from_vec(inst.n(), inst.p(), xp).unwrap();
        let inst_p = ProblemInstance::new(xp, inst.y.clone(), inst.gamma, None).unwrap();
        let c = make_mestimation_correctors(
            LossFamily::ChannelNll(Channel::linear_gaussian(0.3).unwrap()),
            Arc::new(ScalarFunction::abs()),
            &nu(),
        );
        let opts = EngineOptions {
            max_iters: 200,
            tol: 1e-10,
            damping: 0.2,
        };
        let run = run_gamp(
            &inst,
            &c,
            GampState::zero_start(inst.p(), inst.n(), 1.0).unwrap(),
            &opts,
        )
        .unwrap();
        let run_p = run_gamp(
            &inst_p,
            &c,
            GampState::zero_start(inst.p(), inst.n(), 1.0).unwrap(),
            &opts,
        )
        .unwrap();
        // Reductions over the permuted coordinates accumulate in a different
        // order, so agreement is to solver tolerance, not bit-exact.
        for (jp, &j) in perm.iter().enumerate() {
            assert_abs_diff_eq!(run_p.state.s_hat[jp], run.state.s_hat[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_max_iters_is_rejected() {
        let inst = small_instance(3, 6, 3, 1.0, 1.0, 0.5);
        let c = make_posterior_correctors(
            Channel::linear_gaussian(0.5).unwrap(),
            Prior::gaussian(1.0).unwrap(),
            &nu(),
        );
        let opts = EngineOptions {
            max_iters: 0,
            tol: 1e-8,
            damping: 0.0,
        };
        let err = run_gamp(
            &inst,
            &c,
            GampState::zero_start(3, 6, 1.0).unwrap(),
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, AmpError::InvalidArgument(_)));
    }

    #[test]
    fn stationarity_residual_is_zero_at_the_ridge_solution_and_positive_away() {
        let sigma_s2 = 1.0;
        let noise = 0.5;
        let inst = small_instance(19, 8, 4, 1.0, sigma_s2, noise);
        let oracle = ridge_posterior(&inst.x, &inst.y, noise, sigma_s2).unwrap();
        let loss = LossFamily::ChannelNll(Channel::linear_gaussian(noise).unwrap());
        let reg = ScalarFunction::quadratic(0.0, 1.0 / sigma_s2);
        let at_oracle = stationarity_residual(&oracle, &inst, &loss, &reg, &nu()).unwrap();
        assert!(at_oracle <= 1e-8, "residual at oracle: {at_oracle}");
        let away: Vec<f64> = oracle.iter().map(|v| v + 1.0).collect();
        let off = stationarity_residual(&away, &inst, &loss, &reg, &nu()).unwrap();
        assert!(off > 0.1, "residual away from optimum: {off}");
    }

    #[test]
    fn logistic_laplace_runs_converge_for_both_families() {
        // Regression-style check on a moderate instance.
        let gamma = 1.0;
        let p = 250;
        let alpha = 2.0;
        let n = (alpha * p as f64).round() as usize;
        let mut mrng = stream(23, 0, StreamRole::Matrix);
        let x = DenseMatrix::gaussian(n, p, (gamma / p as f64).sqrt(), &mut mrng);
        let prior = Prior::laplace((0.5f64).sqrt()).unwrap(); // variance 1
        let mut srng = stream(23, 0, StreamRole::Signal);
        let s: Vec<f64> = (0..p).map(|_| prior.sample(&mut srng)).collect();
        let z = x.matvec(&s);
        let mut crng = stream(23, 0, StreamRole::Channel);
        let ch = Channel::logistic();
        let y: Vec<f64> = z.iter().map(|&zi| ch.sample(zi, &mut crng)).collect();
        let inst = ProblemInstance::new(x, y, gamma, Some(s)).unwrap();

        let opts = EngineOptions {
            max_iters: 100,
            tol: 1e-8,
            damping: 0.2,
        };
        let lambda_eta0 = gamma * prior.variance();

        let bayes = make_posterior_correctors(ch, prior, &nu());
        let run = run_gamp(
            &inst,
            &bayes,
            GampState::zero_start(p, n, lambda_eta0).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(run.converged, "posterior-mean run did not converge");
        let q_final = run.trajectory.last().unwrap().q_s_emp.unwrap();
        assert!(q_final < prior.variance(), "no signal recovered: {q_final}");

        let loss = LossFamily::ChannelNll(ch);
        let reg = Arc::new(prior.neg_log_density_fn());
        let mest = make_mestimation_correctors(loss.clone(), reg.clone(), &nu());
        let run = run_gamp(
            &inst,
            &mest,
            GampState::zero_start(p, n, lambda_eta0).unwrap(),
            &opts,
        )
        .unwrap();
        assert!(run.converged, "M-estimation run did not converge");
        let resid = stationarity_residual(&run.state.s_hat, &inst, &loss, &reg, &nu()).unwrap();
        assert!(resid <= 1e-5, "stationarity residual {resid}");
    }
}
