//! Signal priors and observation channels.
//!
//! Both are small closed enums: every experiment in the harness is a
//! (prior, channel) pair, and the scalar toolbox only needs log-densities,
//! samplers, and a couple of closed-form facts (variance, binary support).

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::scalar::{sigmoid, softplus, ScalarFunction};

const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Prior law of a single signal coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    /// N(0, variance).
    Gaussian { variance: f64 },
    /// Density exp(-|s| / scale) / (2 scale).
    Laplace { scale: f64 },
}

impl Prior {
    pub fn gaussian(variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "gaussian prior variance must be finite and > 0, got {variance}"
            )));
        }
        Ok(Prior::Gaussian { variance })
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "laplace prior scale must be finite and > 0, got {scale}"
            )));
        }
        Ok(Prior::Laplace { scale })
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Prior::Gaussian { variance } => variance,
            Prior::Laplace { scale } => 2.0 * scale * scale,
        }
    }

    pub fn log_density(&self, s: f64) -> f64 {
        match *self {
            Prior::Gaussian { variance } => -s * s / (2.0 * variance) - 0.5 * (LN_2PI + variance.ln()),
            Prior::Laplace { scale } => -s.abs() / scale - (2.0 * scale).ln(),
        }
    }

    /// The negative log-density as a `ScalarFunction`, with derivatives and
    /// the proximal map attached (normalization constants included, so the
    /// function is exactly -log density, not just proportional to it).
    pub fn neg_log_density_fn(&self) -> ScalarFunction {
        match *self {
            Prior::Gaussian { variance } => {
                let c = 0.5 * (LN_2PI + variance.ln());
                let k = 1.0 / variance;
                ScalarFunction::new(move |s: f64| 0.5 * k * s * s + c)
                    .with_deriv(move |s: f64| k * s)
                    .with_deriv2(move |_| k)
                    .with_analytic_prox(move |lambda: f64, x: f64| {
                        let den = 1.0 + lambda * k;
                        (x / den, 1.0 / den)
                    })
                    .convex()
            }
            Prior::Laplace { scale } => {
                ScalarFunction::weighted_abs(1.0 / scale, (2.0 * scale).ln())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Gaussian { variance } => {
                variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
            Prior::Laplace { scale } => {
                let e: f64 = rng.sample(Exp1);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * scale * e
            }
        }
    }

    pub fn is_log_concave(&self) -> bool {
        true
    }
}

/// Observation channel: the conditional law of y given the linear predictor z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Channel {
    /// y = z + noise, noise ~ N(0, noise_variance).
    LinearGaussian { noise_variance: f64 },
    /// y in {0, 1} with P(y = 1 | z) = 1 / (1 + exp(-z)).
    Logistic,
}

static LOGISTIC_OUTPUTS: [f64; 2] = [0.0, 1.0];

impl Channel {
    pub fn linear_gaussian(noise_variance: f64) -> Result<Self> {
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "channel noise variance must be finite and > 0, got {noise_variance}"
            )));
        }
        Ok(Channel::LinearGaussian { noise_variance })
    }

    pub fn logistic() -> Self {
        Channel::Logistic
    }

    /// The finite output alphabet, if there is one.
    pub fn output_values(&self) -> Option<&'static [f64]> {
        match self {
            Channel::LinearGaussian { .. } => None,
            Channel::Logistic => Some(&LOGISTIC_OUTPUTS),
        }
    }

    pub fn log_likelihood(&self, y: f64, z: f64) -> f64 {
        match *self {
            Channel::LinearGaussian { noise_variance } => {
                -(y - z) * (y - z) / (2.0 * noise_variance)
                    - 0.5 * (LN_2PI + noise_variance.ln())
            }
            Channel::Logistic => -softplus(-(2.0 * y - 1.0) * z),
        }
    }

    /// Negative log-likelihood in z at fixed observation y, as a
    /// `ScalarFunction` with derivatives (and prox where closed-form).
    pub fn neg_log_likelihood_fn(&self, y: f64) -> ScalarFunction {
        match *self {
            Channel::LinearGaussian { noise_variance } => {
                let c = 0.5 * (LN_2PI + noise_variance.ln());
                let k = 1.0 / noise_variance;
                ScalarFunction::new(move |z: f64| 0.5 * k * (z - y) * (z - y) + c)
                    .with_deriv(move |z: f64| k * (z - y))
                    .with_deriv2(move |_| k)
                    .with_analytic_prox(move |lambda: f64, x: f64| {
                        let den = 1.0 + lambda * k;
                        ((x + lambda * k * y) / den, 1.0 / den)
                    })
                    .convex()
            }
            Channel::Logistic => ScalarFunction::logistic_nll(y),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        match *self {
            Channel::LinearGaussian { noise_variance } => {
                z + noise_variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
            Channel::Logistic => {
                if rng.random::<f64>() < sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_log_concave(&self) -> bool {
        true
    }
}

/// Result of the discrete log-concavity screen.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConcavityReport {
    /// Largest second difference of the log-density over the grid.
    pub max_second_diff: f64,
    /// Grid point where it occurred.
    pub at: f64,
    pub ok: bool,
}

/// Screens a log-density for log-concavity by second differences on a
/// uniform grid (at least 101 points). The tolerance absorbs roundoff on
/// kinked densities; a genuinely convex bump exceeds it by orders of
/// magnitude.
pub fn check_log_concavity(
    log_f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> ConcavityReport {
    let n = points.max(101);
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| log_f(lo + i as f64 * h)).collect();
    let mut max_second = f64::NEG_INFINITY;
    let mut at = lo;
    for i in 1..n - 1 {
        let d2 = (vals[i - 1] - 2.0 * vals[i] + vals[i + 1]) / (h * h);
        if d2 > max_second {
            max_second = d2;
            at = lo + i as f64 * h;
        }
    }
    ConcavityReport {
        max_second_diff: max_second,
        at,
        ok: max_second <= 1e-8,
    }
}

/// Convenience screen over a prior's natural range.
pub fn check_prior_log_concavity(prior: &Prior) -> ConcavityReport {
    let half = 8.0 * prior.variance().sqrt().max(1.0);
    check_log_concavity(&|s| prior.log_density(s), -half, half, 401)
}

/// Convenience screen of a channel's likelihood in z at a fixed observation.
pub fn check_channel_log_concavity(channel: &Channel, y: f64) -> ConcavityReport {
    let center = match channel {
        Channel::LinearGaussian { .. } => y,
        Channel::Logistic => 0.0,
    };
    check_log_concavity(&|z| channel.log_likelihood(y, z), center - 12.0, center + 12.0, 401)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn densities_normalize_to_one() {
        // Composite Simpson over a wide window.
        let simint = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut acc = f(a) + f(b);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
            }
            acc * h / 3.0
        };
        let g = Prior::gaussian(1.7).unwrap();
        let mass_g = simint(&|s| g.log_density(s).exp(), -40.0, 40.0, 40_000);
        assert_abs_diff_eq!(mass_g, 1.0, epsilon = 1e-10);
        let l = Prior::laplace(0.8).unwrap();
        let mass_l = simint(&|s| l.log_density(s).exp(), -40.0, 0.0, 20_000)
            + simint(&|s| l.log_density(s).exp(), 0.0, 40.0, 20_000);
        assert_abs_diff_eq!(mass_l, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn logistic_likelihoods_sum_to_one() {
        let ch = Channel::logistic();
        for &z in &[-3.0, 0.0, 0.4, 9.0] {
            let total = ch.log_likelihood(1.0, z).exp() + ch.log_likelihood(0.0, z).exp();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn neg_log_fns_match_log_densities() {
        let cases = [Prior::gaussian(2.0).unwrap(), Prior::laplace(1.5).unwrap()];
        for p in &cases {
            let f = p.neg_log_density_fn();
            for &s in &[-2.0, 0.0, 0.3, 4.0] {
                assert_abs_diff_eq!(f.eval(s), -p.log_density(s), epsilon = 1e-12);
            }
        }
        let ch = Channel::linear_gaussian(0.5).unwrap();
        let f = ch.neg_log_likelihood_fn(1.2);
        for &z in &[-1.0, 0.0, 2.0] {
            assert_abs_diff_eq!(f.eval(z), -ch.log_likelihood(1.2, z), epsilon = 1e-12);
        }
        let lo = Channel::logistic().neg_log_likelihood_fn(0.0);
        assert_abs_diff_eq!(
            lo.eval(1.3),
            -Channel::logistic().log_likelihood(0.0, 1.3),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampler_moments_match_declared_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 400_000;
        for p in [Prior::gaussian(2.0).unwrap(), Prior::laplace(1.0).unwrap()] {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for _ in 0..n {
                let s = p.sample(&mut rng);
                m1 += s;
                m2 += s * s;
            }
            m1 /= n as f64;
            m2 /= n as f64;
            assert!(m1.abs() < 0.02, "mean {m1} too far from 0");
            assert!(
                (m2 - p.variance()).abs() < 0.03 * p.variance(),
                "variance {m2} vs {}",
                p.variance()
            );
        }
    }

    #[test]
    fn channel_samplers_match_declared_laws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let lg = Channel::linear_gaussian(0.25).unwrap();
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n {
            let y = lg.sample(1.0, &mut rng);
            m1 += y;
            m2 += (y - 1.0) * (y - 1.0);
        }
        assert!((m1 / n as f64 - 1.0).abs() < 0.01);
        assert!((m2 / n as f64 - 0.25).abs() < 0.01);
        let lo = Channel::logistic();
        let mut ones = 0usize;
        for _ in 0..n {
            if lo.sample(0.8, &mut rng) == 1.0 {
                ones += 1;
            }
        }
        let p = ones as f64 / n as f64;
        assert!((p - sigmoid(0.8)).abs() < 0.01, "P(y=1) {p}");
    }

    #[test]
    fn serde_round_trip_uses_name_tags() {
        let p = Prior::laplace(1.25).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"name\":\"laplace\""), "{s}");
        assert_eq!(serde_json::from_str::<Prior>(&s).unwrap(), p);
        let c = Channel::linear_gaussian(0.5).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"name\":\"linear_gaussian\""), "{s}");
        assert_eq!(serde_json::from_str::<Channel>(&s).unwrap(), c);
        let c = Channel::logistic();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"name\":\"logistic\""), "{s}");
        assert_eq!(serde_json::from_str::<Channel>(&s).unwrap(), c);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(Prior::gaussian(0.0).is_err());
        assert!(Prior::gaussian(-1.0).is_err());
        assert!(Prior::laplace(f64::NAN).is_err());
        assert!(Channel::linear_gaussian(0.0).is_err());
    }

    #[test]
    fn concavity_screen_passes_builtins_and_flags_a_bump() {
        for p in [Prior::gaussian(1.0).unwrap(), Prior::laplace(1.0).unwrap()] {
            let r = check_prior_log_concavity(&p);
            assert!(r.ok, "{p:?}: max second diff {}", r.max_second_diff);
        }
        for y in [0.0, 1.0] {
            let r = check_channel_log_concavity(&Channel::logistic(), y);
            assert!(r.ok, "logistic y={y}: {}", r.max_second_diff);
        }
        let r = check_channel_log_concavity(&Channel::linear_gaussian(1.0).unwrap(), 0.7);
        assert!(r.ok);
        // Two-component mixture: log-density has a convex valley between the
        // modes.
        let bimodal = |s: f64| {
            let a = (-(s - 2.0) * (s - 2.0) / 0.2).exp();
            let b = (-(s + 2.0) * (s + 2.0) / 0.2).exp();
            (0.5 * a + 0.5 * b).ln()
        };
        let r = check_log_concavity(&bimodal, -6.0, 6.0, 401);
        assert!(!r.ok, "bimodal passed with max second diff {}", r.max_second_diff);
        assert!(r.at.abs() < 1.5, "valley should be near 0, got {}", r.at);
    }
}
