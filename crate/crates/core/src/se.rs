//! Scalar state evolution for the posterior-mean iteration.
//!
//! The high-dimensional dynamics of the engine collapse, as P grows with
//! N/P fixed, to a two-variable scalar recursion: the output-side residual
//! variance q_eta and the signal-side effective noise q_h. The recursion
//! here predicts them iteration by iteration, finds their fixed point, and
//! converts the fixed point into the smoothing parameters that make the
//! M-estimation family match posterior-mean performance.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::gamp::IterationRecord;
use crate::models::{Channel, Prior};
use crate::rng::{stream, StreamRole};
use crate::scalar::{
    gauss_expectation, gauss_posterior_moments, prior_posterior_moments, scalar_mmse_error,
    sigmoid, Numerics,
};

/// One point of the scalar state: per-component MSE q_s, output residual
/// variance q_eta (= gamma * q_s for states produced here), and effective
/// scalar-channel noise q_h derived from q_eta.
///
/// States built by [`se_initial_state`] and [`bamp_se_step`] keep q_h
/// consistent with their own q_eta. Empirical states measured from a finite
/// run satisfy the proportionality and the pairing only approximately.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeState {
    pub q_s: f64,
    pub q_eta: f64,
    pub q_h: f64,
    pub iteration: usize,
}

/// The smoothing parameters that tune the M-estimation family to
/// posterior-mean performance at a state-evolution fixed point.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmoothingParams {
    pub lambda_eta: f64,
    pub lambda_h: f64,
}

/// How the two scalar expectations are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeMethod {
    /// Nested Gauss-Hermite quadrature (deterministic, the default).
    Quadrature,
    /// Plain Monte-Carlo sampling, for validating the quadrature path.
    MonteCarlo { samples: u64, seed: u64 },
}

impl Default for SeMethod {
    fn default() -> Self {
        SeMethod::Quadrature
    }
}

fn validate_shape(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// Mean squared score of the smoothed observation family: the expectation of
/// G_y(q, y, eta)^2 with eta ~ N(0, eta_var), z | eta ~ N(eta, q), and
/// y | z from the channel. Equals the averaged Fisher information of the
/// smoothed family (integration by parts in y), which
/// [`crate::scalar::avg_fisher_info`] computes through the curvature instead.
pub fn avg_score_power(channel: &Channel, q: f64, eta_var: f64, nu: &Numerics) -> Result<f64> {
    if !(q.is_finite() && q >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "smoothing level q must be finite and >= 0, got {q}"
        )));
    }
    let local = |eta: f64| -> Result<f64> {
        if q == 0.0 {
            return Ok(match channel {
                Channel::LinearGaussian { noise_variance } => 1.0 / noise_variance,
                // E_y (sigma(eta) - y)^2 weighted by the two outcomes.
                Channel::Logistic => {
                    let s = sigmoid(eta);
                    s * (1.0 - s)
                }
            });
        }
        match channel.output_values() {
            Some(ys) => {
                let mut acc = 0.0;
                for &y in ys {
                    let m =
                        gauss_posterior_moments(&|z| channel.log_likelihood(y, z), q, eta, nu)?;
                    let g = (eta - m.mean) / q;
                    acc += m.log_norm.exp() * g * g;
                }
                Ok(acc)
            }
            None => match channel {
                Channel::LinearGaussian { noise_variance } => {
                    // y | eta is Gaussian with variance noise + q.
                    let g = |y: f64| -> Result<f64> {
                        let m = gauss_posterior_moments(
                            &|z| channel.log_likelihood(y, z),
                            q,
                            eta,
                            nu,
                        )?;
                        let g = (eta - m.mean) / q;
                        Ok(g * g)
                    };
                    gauss_expectation(&g, eta, noise_variance + q, nu, "avg_score_power")
                }
                Channel::Logistic => unreachable!("logistic channel is binary"),
            },
        }
    };
    gauss_expectation(&local, 0.0, eta_var, nu, "avg_score_power")
}

fn mc_score_power(
    channel: &Channel,
    q: f64,
    eta_var: f64,
    samples: u64,
    seed: u64,
    nu: &Numerics,
) -> Result<f64> {
    let mut rng = stream(seed, 0, StreamRole::Generic);
    let sd_eta = eta_var.sqrt();
    let sd_z = q.sqrt();
    let mut acc = 0.0;
    for _ in 0..samples {
        let eta = sd_eta * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let z = eta + sd_z * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let y = channel.sample(z, &mut rng);
        let g = if q == 0.0 {
            channel.neg_log_likelihood_fn(y).deriv_or_fd(eta, nu)
        } else {
            let m = gauss_posterior_moments(&|v| channel.log_likelihood(y, v), q, eta, nu)?;
            (eta - m.mean) / q
        };
        acc += g * g;
    }
    Ok(acc / samples as f64)
}

fn mc_mmse(prior: &Prior, q_h: f64, samples: u64, seed: u64, nu: &Numerics) -> Result<f64> {
    let mut rng = stream(seed, 1, StreamRole::Generic);
    let sd = q_h.sqrt();
    let mut acc = 0.0;
    for _ in 0..samples {
        let s = prior.sample(&mut rng);
        let h = s + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let m = prior_posterior_moments(prior, q_h, h, nu)?;
        acc += (m.mean - s) * (m.mean - s);
    }
    Ok(acc / samples as f64)
}

/// q_h as a function of q_eta: the output-side equation.
fn q_h_from_q_eta(
    q_eta: f64,
    prior: &Prior,
    channel: &Channel,
    alpha: f64,
    gamma: f64,
    nu: &Numerics,
    method: SeMethod,
) -> Result<f64> {
    let ceiling = gamma * prior.variance();
    let eta_var = ceiling - q_eta;
    if eta_var < -1e-9 * ceiling {
        return Err(AmpError::InvalidArgument(format!(
            "q_eta = {q_eta} exceeds gamma * sigma_s^2 = {ceiling}; not a reachable state"
        )));
    }
    let eta_var = eta_var.max(0.0);
    let info = match method {
        SeMethod::Quadrature => avg_score_power(channel, q_eta, eta_var, nu)?,
        SeMethod::MonteCarlo { samples, seed } => {
            mc_score_power(channel, q_eta, eta_var, samples, seed, nu)?
        }
    };
    if !(info.is_finite() && info > 0.0) {
        return Err(AmpError::QuadratureFailed {
            context: "q_h_from_q_eta",
            detail: format!("mean squared score came out {info:e}"),
        });
    }
    Ok(1.0 / (alpha * gamma * info))
}

/// The next output-side variance: the signal-side equation.
fn q_eta_from_q_h(
    q_h: f64,
    prior: &Prior,
    gamma: f64,
    nu: &Numerics,
    method: SeMethod,
) -> Result<f64> {
    let mmse = match method {
        SeMethod::Quadrature => scalar_mmse_error(prior, q_h, nu)?,
        SeMethod::MonteCarlo { samples, seed } => mc_mmse(prior, q_h, samples, seed, nu)?,
    };
    Ok(gamma * mmse)
}

/// The zero-knowledge start matching the engine's zero initial estimate:
/// q_s = sigma_s^2, q_eta = gamma * sigma_s^2, q_h derived from it.
pub fn se_initial_state(
    prior: &Prior,
    channel: &Channel,
    alpha: f64,
    gamma: f64,
    nu: &Numerics,
    method: SeMethod,
) -> Result<SeState> {
    validate_shape(alpha, gamma)?;
    let q_eta = gamma * prior.variance();
    let q_h = q_h_from_q_eta(q_eta, prior, channel, alpha, gamma, nu, method)?;
    Ok(SeState {
        q_s: prior.variance(),
        q_eta,
        q_h,
        iteration: 0,
    })
}

/// One state-evolution update: q_eta advances through the scalar MMSE at the
/// state's q_h, and the new q_h is derived from the new q_eta.
pub fn bamp_se_step(
    state: &SeState,
    prior: &Prior,
    channel: &Channel,
    alpha: f64,
    gamma: f64,
    nu: &Numerics,
    method: SeMethod,
) -> Result<SeState> {
    validate_shape(alpha, gamma)?;
    if !(state.q_h.is_finite() && state.q_h > 0.0 && state.q_eta.is_finite() && state.q_eta >= 0.0)
    {
        return Err(AmpError::InvalidArgument(format!(
            "state-evolution state out of range: q_eta = {}, q_h = {}",
            state.q_eta, state.q_h
        )));
    }
    let ceiling = gamma * prior.variance();
    if state.q_eta > ceiling * (1.0 + 1e-9) {
        return Err(AmpError::InvalidArgument(format!(
            "q_eta = {} exceeds gamma * sigma_s^2 = {ceiling}; not a reachable state",
            state.q_eta
        )));
    }
    let q_eta = q_eta_from_q_h(state.q_h, prior, gamma, nu, method)?;
    let q_h = q_h_from_q_eta(q_eta, prior, channel, alpha, gamma, nu, method)?;
    Ok(SeState {
        q_s: q_eta / gamma,
        q_eta,
        q_h,
        iteration: state.iteration + 1,
    })
}

/// The predicted trajectory from the zero-knowledge start: `steps` states
/// with indices 0..steps, aligned with the engine's per-iteration records
/// (state t pairs with the record of step t).
pub fn se_trajectory(
    prior: &Prior,
    channel: &Channel,
    alpha: f64,
    gamma: f64,
    steps: usize,
    nu: &Numerics,
    method: SeMethod,
) -> Result<Vec<SeState>> {
    let mut out = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(out);
    }
    let mut state = se_initial_state(prior, channel, alpha, gamma, nu, method)?;
    out.push(state);
    for _ in 1..steps {
        state = bamp_se_step(&state, prior, channel, alpha, gamma, nu, method)?;
        out.push(state);
    }
    Ok(out)
}

/// Damping factor on q_eta inside the fixed-point iteration.
const SE_DAMPING: f64 = 0.5;

/// Fixed point of the recursion from the zero-knowledge start, by damped
/// iteration until |change in q_s| / max(q_s, 1e-12) <= tol. The returned
/// state satisfies the output-side equation by construction and the
/// signal-side equation to a residual of order tol (logged at debug level).
/// The iteration starts from the zero-knowledge state only, so if the
/// recursion had several stable roots this would find the one reached from
/// cold start and not report the others.
pub fn bamp_se_fixed_point(
    prior: &Prior,
    channel: &Channel,
    alpha: f64,
    gamma: f64,
    tol: f64,
    max_iters: usize,
    nu: &Numerics,
    method: SeMethod,
) -> Result<SeState> {
    validate_shape(alpha, gamma)?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(AmpError::InvalidArgument(format!(
            "tol must be positive, got {tol}"
        )));
    }
    if max_iters == 0 {
        return Err(AmpError::InvalidArgument(
            "max_iters must be at least 1".to_string(),
        ));
    }
    let mut q_eta = gamma * prior.variance();
    let mut q_h = q_h_from_q_eta(q_eta, prior, channel, alpha, gamma, nu, method)?;
    let mut iters = 0usize;
    loop {
        iters += 1;
        let q_eta_raw = q_eta_from_q_h(q_h, prior, gamma, nu, method)?;
        let q_eta_next = SE_DAMPING * q_eta + (1.0 - SE_DAMPING) * q_eta_raw;
        let dq_s = (q_eta_next - q_eta).abs() / gamma;
        let done = dq_s <= tol * (q_eta / gamma).max(1e-12);
        let q_eta_prev = q_eta;
        q_eta = q_eta_next;
        q_h = q_h_from_q_eta(q_eta, prior, channel, alpha, gamma, nu, method)?;
        if done {
            let resid =
                (q_eta_from_q_h(q_h, prior, gamma, nu, method)? - q_eta).abs() / q_eta.max(1e-300);
            log::debug!(
                "state-evolution fixed point after {iters} iterations: q_s = {:.6e}, \
                 signal-side relative residual {resid:.3e}",
                q_eta / gamma
            );
            return Ok(SeState {
                q_s: q_eta / gamma,
                q_eta,
                q_h,
                iteration: iters,
            });
        }
        if iters >= max_iters {
            return Err(AmpError::FixedPointNotConverged {
                iters,
                q_s_prev: q_eta_prev / gamma,
                q_s_last: q_eta / gamma,
            });
        }
    }
}

/// The smoothing parameters that make the M-estimation family optimal at a
/// fixed point: lambda_eta = gamma * q_s and lambda_h = q_h.
pub fn optimal_smoothing_params(fp: &SeState, gamma: f64) -> SmoothingParams {
    SmoothingParams {
        lambda_eta: gamma * fp.q_s,
        lambda_h: fp.q_h,
    }
}

/// Projects an engine trajectory onto state coordinates: per iteration the
/// measured q_s, q_eta, q_h. Requires the run to have been made with ground
/// truth attached (the records carry the moments only then).
pub fn empirical_state(trajectory: &[IterationRecord]) -> Result<Vec<SeState>> {
    trajectory
        .iter()
        .map(|r| {
            let (q_s, q_eta, q_h) = match (r.q_s_emp, r.q_eta_emp, r.q_h_emp) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(AmpError::InvalidArgument(
                        "trajectory lacks ground-truth diagnostics; run with s_true attached"
                            .to_string(),
                    ))
                }
            };
            Ok(SeState {
                q_s,
                q_eta,
                q_h,
                iteration: r.t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::avg_fisher_info;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn nu() -> Numerics {
        Numerics::default()
    }

    const Q: SeMethod = SeMethod::Quadrature;

    #[test]
    fn initial_state_is_the_zero_knowledge_start() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let st = se_initial_state(&prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        assert_eq!(st.iteration, 0);
        assert_abs_diff_eq!(st.q_s, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(st.q_eta, 2.0, epsilon = 1e-14);
        // Frozen from an independent numerical-integration oracle.
        assert_relative_eq!(st.q_h, 3.791137833405665, max_relative = 1e-7);
    }

    #[test]
    fn one_se_step_matches_the_frozen_oracle() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let st = se_initial_state(&prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        let next = bamp_se_step(&st, &prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        assert_eq!(next.iteration, 1);
        assert_relative_eq!(next.q_eta, 1.2774789629516523, max_relative = 1e-7);
        assert_abs_diff_eq!(next.q_eta, next.q_s * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_gaussian_step_matches_closed_forms() {
        for &(sigma_s2, noise, alpha, gamma) in
            &[(1.0, 1.0, 2.0, 1.0), (1.5, 0.3, 1.3, 2.0)]
        {
            let prior = Prior::gaussian(sigma_s2).unwrap();
            let ch = Channel::linear_gaussian(noise).unwrap();
            let st = se_initial_state(&prior, &ch, alpha, gamma, &nu(), Q).unwrap();
            let q_h0 = (noise + gamma * sigma_s2) / (alpha * gamma);
            assert_relative_eq!(st.q_h, q_h0, max_relative = 1e-9);
            let next = bamp_se_step(&st, &prior, &ch, alpha, gamma, &nu(), Q).unwrap();
            let q_eta1 = gamma * sigma_s2 * q_h0 / (sigma_s2 + q_h0);
            assert_relative_eq!(next.q_eta, q_eta1, max_relative = 1e-9);
            assert_relative_eq!(
                next.q_h,
                (noise + q_eta1) / (alpha * gamma),
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn squared_score_equals_fisher_curvature() {
        // Integration by parts in y makes the two expectations equal for the
        // exact integrals; the two independent quadratures must agree.
        let ch = Channel::logistic();
        for &q in &[0.5, 2.0] {
            for &v in &[0.5, 1.5] {
                let a = avg_score_power(&ch, q, v, &nu()).unwrap();
                let b = avg_fisher_info(&ch, q, v, &nu()).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-7);
            }
        }
        let ch = Channel::linear_gaussian(0.8).unwrap();
        let a = avg_score_power(&ch, 1.2, 0.7, &nu()).unwrap();
        assert_relative_eq!(a, 1.0 / (0.8 + 1.2), max_relative = 1e-9);
    }

    #[test]
    fn gaussian_gaussian_fixed_point_matches_bisection() {
        // sigma_s^2 = noise = gamma = 1, alpha = 2 solves q_s^2 + 2 q_s = 1.
        let prior = Prior::gaussian(1.0).unwrap();
        let ch = Channel::linear_gaussian(1.0).unwrap();
        let fp = bamp_se_fixed_point(&prior, &ch, 2.0, 1.0, 1e-12, 500, &nu(), Q).unwrap();
        assert_relative_eq!(fp.q_s, std::f64::consts::SQRT_2 - 1.0, max_relative = 1e-8);

        // A second parameter set against a bisection root of the scalar
        // equation q = 1 / (1/sigma_s^2 + alpha gamma / (noise + gamma q)).
        let (sigma_s2, noise, alpha, gamma) = (1.5, 0.3, 1.3, 0.8);
        let g = |q: f64| q - 1.0 / (1.0 / sigma_s2 + alpha * gamma / (noise + gamma * q));
        let (mut lo, mut hi) = (0.0, sigma_s2);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let prior = Prior::gaussian(sigma_s2).unwrap();
        let ch = Channel::linear_gaussian(noise).unwrap();
        let fp = bamp_se_fixed_point(&prior, &ch, alpha, gamma, 1e-12, 500, &nu(), Q).unwrap();
        assert_relative_eq!(fp.q_s, root, max_relative = 1e-8);
    }

    #[test]
    fn fixed_point_satisfies_both_equations() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let tol = 1e-10;
        let fp = bamp_se_fixed_point(&prior, &ch, 2.0, 1.0, tol, 2000, &nu(), Q).unwrap();
        // Output side: q_h is derived from q_eta by construction; recompute.
        let q_h = super::q_h_from_q_eta(fp.q_eta, &prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        assert_relative_eq!(fp.q_h, q_h, max_relative = 10.0 * tol);
        // Signal side: gamma * MMSE at q_h returns q_eta.
        let q_eta = super::q_eta_from_q_h(fp.q_h, &prior, 1.0, &nu(), Q).unwrap();
        assert!(
            (q_eta - fp.q_eta).abs() / fp.q_eta <= 10.0 * tol,
            "signal-side residual {} at q_eta = {}",
            (q_eta - fp.q_eta).abs() / fp.q_eta,
            fp.q_eta
        );
        assert_abs_diff_eq!(fp.q_eta, fp.q_s, epsilon = 1e-12);
    }

    #[test]
    fn infinite_data_limit_recovers_the_signal() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let fp = bamp_se_fixed_point(&prior, &ch, 1e4, 1.0, 1e-10, 2000, &nu(), Q).unwrap();
        assert!(
            fp.q_s <= prior.variance() / 100.0,
            "q_s = {} at alpha = 1e4",
            fp.q_s
        );
    }

    #[test]
    fn error_is_monotone_in_measurement_density() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let mut prev = f64::INFINITY;
        for &alpha in &[0.5, 1.0, 2.0, 4.0] {
            let fp = bamp_se_fixed_point(&prior, &ch, alpha, 1.0, 1e-10, 2000, &nu(), Q).unwrap();
            assert!(
                fp.q_s < prev,
                "q_s did not decrease at alpha = {alpha}: {} >= {prev}",
                fp.q_s
            );
            assert!(fp.q_s > 0.0 && fp.q_s <= prior.variance());
            prev = fp.q_s;
        }
    }

    #[test]
    fn monte_carlo_validates_the_quadrature_path() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let mc = SeMethod::MonteCarlo {
            samples: 200_000,
            seed: 7,
        };
        let st_q = se_initial_state(&prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        let st_m = se_initial_state(&prior, &ch, 2.0, 1.0, &nu(), mc).unwrap();
        assert_relative_eq!(st_m.q_h, st_q.q_h, max_relative = 0.02);
        let n_q = bamp_se_step(&st_q, &prior, &ch, 2.0, 1.0, &nu(), Q).unwrap();
        let n_m = bamp_se_step(&st_q, &prior, &ch, 2.0, 1.0, &nu(), mc).unwrap();
        assert_relative_eq!(n_m.q_eta, n_q.q_eta, max_relative = 0.02);
    }

    #[test]
    fn overshot_q_eta_is_rejected() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let bad = SeState {
            q_s: 3.0,
            q_eta: 3.0, // exceeds gamma * sigma_s^2 = 2
            q_h: 1.0,
            iteration: 0,
        };
        let err = bamp_se_step(&bad, &prior, &ch, 2.0, 1.0, &nu(), Q).unwrap_err();
        assert!(matches!(err, AmpError::InvalidArgument(_)));
    }

    #[test]
    fn smoothing_params_follow_the_fixed_point() {
        let fp = SeState {
            q_s: 0.4,
            q_eta: 0.8,
            q_h: 1.7,
            iteration: 12,
        };
        let p1 = optimal_smoothing_params(&fp, 2.0);
        assert_abs_diff_eq!(p1.lambda_eta, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(p1.lambda_h, 1.7, epsilon = 1e-15);
        let p2 = optimal_smoothing_params(&fp, 4.0);
        assert_abs_diff_eq!(p2.lambda_eta, 1.6, epsilon = 1e-15);
        let zero = SeState {
            q_s: 0.0,
            q_eta: 0.0,
            q_h: 0.5,
            iteration: 3,
        };
        assert_abs_diff_eq!(
            optimal_smoothing_params(&zero, 5.0).lambda_eta,
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn empirical_state_projects_engine_records() {
        let rec = |t: usize, with_truth: bool| IterationRecord {
            t,
            lambda_eta: 1.0,
            lambda_h: 2.0,
            q_s_emp: with_truth.then_some(0.5 + t as f64),
            q_eta_emp: with_truth.then_some(1.5 + t as f64),
            q_h_emp: with_truth.then_some(2.5 + t as f64),
            rel_change: 0.1,
            clamped: false,
        };
        let states = empirical_state(&[rec(0, true), rec(1, true)]).unwrap();
        assert_eq!(states.len(), 2);
        assert_abs_diff_eq!(states[1].q_s, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(states[1].q_eta, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(states[1].q_h, 3.5, epsilon = 1e-15);
        assert_eq!(states[1].iteration, 1);
        let err = empirical_state(&[rec(0, false)]).unwrap_err();
        assert!(matches!(err, AmpError::InvalidArgument(_)));
    }

    #[test]
    fn se_trajectory_is_aligned_and_monotone_early() {
        let prior = Prior::laplace(1.0).unwrap();
        let ch = Channel::logistic();
        let traj = se_trajectory(&prior, &ch, 2.0, 1.0, 6, &nu(), Q).unwrap();
        assert_eq!(traj.len(), 6);
        assert_eq!(traj[0].iteration, 0);
        assert_abs_diff_eq!(traj[0].q_eta, 2.0, epsilon = 1e-14);
        assert_eq!(traj[5].iteration, 5);
        for w in traj.windows(2) {
            assert!(
                w[1].q_s < w[0].q_s,
                "q_s should shrink from cold start: {} -> {}",
                w[0].q_s,
                w[1].q_s
            );
        }
    }
}
