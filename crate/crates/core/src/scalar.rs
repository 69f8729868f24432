//! Scalar convex-analysis and smoothing toolbox.
//!
//! Everything downstream is built from a handful of one-dimensional
//! primitives: proximal maps, Moreau envelopes, Gaussian smoothing of
//! log-densities, and posterior moments under a Gaussian observation kernel.
//! All operations are pure functions of their inputs plus a [`Numerics`]
//! parameter block that pins step sizes, node counts, and tolerances.

use std::f64::consts::{LN_2, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::models::{Channel, Prior};
use crate::quad::{erfcx, hermite_rule, ln_erfc, log_sum_exp};

/// Tunable constants for the scalar numerics. Defaults are the values used
/// everywhere in the shipped experiments; they are echoed into every output
/// file so results are reproducible from the config alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    /// Gauss-Hermite node count for smoothing integrals (doubled once as an
    /// internal accuracy check).
    pub gh_nodes: usize,
    /// Node-doubling agreement threshold that triggers the adaptive Simpson
    /// fallback.
    pub quad_check_tol: f64,
    /// Relative tolerance of the adaptive Simpson fallback.
    pub simpson_rel_tol: f64,
    /// Relative step for central finite differences.
    pub fd_step_rel: f64,
    /// Absolute tolerance on the argument of the 1-d minimizer.
    pub prox_tol: f64,
    /// Iteration cap for the 1-d minimizer / prox root solve.
    pub prox_max_iter: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            gh_nodes: 61,
            quad_check_tol: 1e-6,
            simpson_rel_tol: 1e-10,
            fd_step_rel: 1e-5,
            prox_tol: 1e-10,
            prox_max_iter: 200,
        }
    }
}

impl Numerics {
    pub fn fd_step(&self, x: f64) -> f64 {
        self.fd_step_rel * x.abs().max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gh_nodes < 3 {
            return Err(AmpError::InvalidArgument(format!(
                "gh_nodes must be at least 3, got {}",
                self.gh_nodes
            )));
        }
        for (name, v) in [
            ("quad_check_tol", self.quad_check_tol),
            ("simpson_rel_tol", self.simpson_rel_tol),
            ("fd_step_rel", self.fd_step_rel),
            ("prox_tol", self.prox_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(AmpError::InvalidArgument(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        if self.prox_max_iter == 0 {
            return Err(AmpError::InvalidArgument(
                "prox_max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

type EvalFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;
type ProxFn = Box<dyn Fn(f64, f64) -> (f64, f64) + Send + Sync>;
type SubgradFn = Box<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

/// A scalar function handed to the convex-analysis primitives.
///
/// Only `eval` is mandatory. Analytic first/second derivatives, a
/// subdifferential interval, and a closed-form proximal map can be attached
/// when known; the primitives fall back to finite differences and numerical
/// minimization otherwise.
pub struct ScalarFunction {
    eval: EvalFn,
    deriv: Option<EvalFn>,
    deriv2: Option<EvalFn>,
    subgrad: Option<SubgradFn>,
    /// Closed-form `(prox, d prox/dx)` as a function of `(lambda, x)`.
    analytic_prox: Option<ProxFn>,
    domain: (f64, f64),
    convex: bool,
}

impl ScalarFunction {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFunction {
            eval: Box::new(eval),
            deriv: None,
            deriv2: None,
            subgrad: None,
            analytic_prox: None,
            domain: (f64::NEG_INFINITY, f64::INFINITY),
            convex: false,
        }
    }

    pub fn with_deriv(mut self, d: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.deriv = Some(Box::new(d));
        self
    }

    pub fn with_deriv2(mut self, d2: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.deriv2 = Some(Box::new(d2));
        self
    }

    pub fn with_subgrad(mut self, s: impl Fn(f64) -> (f64, f64) + Send + Sync + 'static) -> Self {
        self.subgrad = Some(Box::new(s));
        self
    }

    pub fn with_analytic_prox(
        mut self,
        p: impl Fn(f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Self {
        self.analytic_prox = Some(Box::new(p));
        self
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = (lo, hi);
        self
    }

    pub fn convex(mut self) -> Self {
        self.convex = true;
        self
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn has_deriv(&self) -> bool {
        self.deriv.is_some()
    }

    pub fn deriv_exact(&self, x: f64) -> Option<f64> {
        self.deriv.as_ref().map(|d| d(x))
    }

    pub fn deriv2_exact(&self, x: f64) -> Option<f64> {
        self.deriv2.as_ref().map(|d| d(x))
    }

    /// First derivative: analytic when attached, otherwise a central
    /// difference with the step from `nu`.
    pub fn deriv_or_fd(&self, x: f64, nu: &Numerics) -> f64 {
        match &self.deriv {
            Some(d) => d(x),
            None => {
                let h = nu.fd_step(x);
                (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)
            }
        }
    }

    /// Second derivative: analytic when attached, otherwise a central
    /// difference of the first derivative (itself possibly a difference).
    pub fn deriv2_or_fd(&self, x: f64, nu: &Numerics) -> f64 {
        match &self.deriv2 {
            Some(d2) => d2(x),
            None => {
                let h = nu.fd_step(x);
                (self.deriv_or_fd(x + h, nu) - self.deriv_or_fd(x - h, nu)) / (2.0 * h)
            }
        }
    }

    /// Subdifferential interval at `x`; a single point for smooth functions.
    pub fn subgrad_range(&self, x: f64, nu: &Numerics) -> (f64, f64) {
        match &self.subgrad {
            Some(s) => s(x),
            None => {
                let d = self.deriv_or_fd(x, nu);
                (d, d)
            }
        }
    }

    pub(crate) fn analytic_prox_at(&self, lambda: f64, x: f64) -> Option<(f64, f64)> {
        self.analytic_prox.as_ref().map(|p| p(lambda, x))
    }

    // ------------------------------------------------------------------
    // Catalog of named functions used throughout the tests and the harness.
    // ------------------------------------------------------------------

    /// f(x) = w |x| + c, with the soft-threshold prox attached.
    pub fn weighted_abs(w: f64, c: f64) -> Self {
        assert!(w > 0.0, "weight of |x| must be positive");
        ScalarFunction::new(move |x: f64| w * x.abs() + c)
            .with_deriv(move |x: f64| w * x.signum())
            .with_subgrad(move |x: f64| {
                if x == 0.0 {
                    (-w, w)
                } else {
                    (w * x.signum(), w * x.signum())
                }
            })
            .with_analytic_prox(move |lambda: f64, x: f64| {
                let t = lambda * w;
                if x.abs() <= t {
                    (0.0, 0.0)
                } else {
                    (x - t * x.signum(), 1.0)
                }
            })
            .convex()
    }

    /// f(x) = |x|.
    pub fn abs() -> Self {
        Self::weighted_abs(1.0, 0.0)
    }

    /// f(x) = k (x - c)^2 / 2.
    pub fn quadratic(center: f64, curvature: f64) -> Self {
        assert!(curvature >= 0.0, "quadratic catalog entry must be convex");
        let f = ScalarFunction::new(move |x: f64| 0.5 * curvature * (x - center) * (x - center))
            .with_deriv(move |x: f64| curvature * (x - center))
            .with_deriv2(move |_| curvature)
            .with_analytic_prox(move |lambda: f64, x: f64| {
                let den = 1.0 + lambda * curvature;
                ((x + lambda * curvature * center) / den, 1.0 / den)
            });
        f.convex()
    }

    /// Huber function: x^2/2 inside [-delta, delta], linear continuation
    /// outside.
    pub fn huber(delta: f64) -> Self {
        assert!(delta > 0.0);
        ScalarFunction::new(move |x: f64| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * x.abs() - 0.5 * delta * delta
            }
        })
        .with_deriv(move |x: f64| x.clamp(-delta, delta))
        .with_deriv2(move |x: f64| if x.abs() < delta { 1.0 } else { 0.0 })
        .with_analytic_prox(move |lambda: f64, x: f64| {
            if x.abs() <= delta * (1.0 + lambda) {
                (x / (1.0 + lambda), 1.0 / (1.0 + lambda))
            } else {
                (x - lambda * delta * x.signum(), 1.0)
            }
        })
        .convex()
    }

    /// Negative log-likelihood of a logistic binary observation `y` in {0, 1}
    /// as a function of the linear predictor.
    pub fn logistic_nll(y: f64) -> Self {
        assert!(y == 0.0 || y == 1.0, "logistic observation must be 0 or 1");
        let sign = 2.0 * y - 1.0;
        ScalarFunction::new(move |z: f64| softplus(-sign * z))
            .with_deriv(move |z: f64| sigmoid(z) - y)
            .with_deriv2(move |z: f64| {
                let s = sigmoid(z);
                s * (1.0 - s)
            })
            .convex()
    }

    /// The zero function (prox is the identity).
    pub fn zero() -> Self {
        ScalarFunction::new(|_| 0.0)
            .with_deriv(|_| 0.0)
            .with_deriv2(|_| 0.0)
            .with_analytic_prox(|_, x| (x, 1.0))
            .convex()
    }

    /// A constant function.
    pub fn constant(c: f64) -> Self {
        ScalarFunction::new(move |_| c)
            .with_deriv(|_| 0.0)
            .with_deriv2(|_| 0.0)
            .with_analytic_prox(|_, x| (x, 1.0))
            .convex()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(a)) without overflow.
pub(crate) fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

// ----------------------------------------------------------------------
// 1-d minimization
// ----------------------------------------------------------------------

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Minimizes a unimodal objective by downhill bracketing from `x0` followed
/// by golden-section refinement to absolute argument tolerance `tol`.
pub(crate) fn minimize_unimodal(
    g: &dyn Fn(f64) -> f64,
    x0: f64,
    initial_step: f64,
    domain: (f64, f64),
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64)> {
    let clamp = |v: f64| v.clamp(domain.0, domain.1);
    let mut iters = 0usize;
    let mut step = initial_step.max(tol * 16.0);
    let mut a = clamp(x0 - step);
    let mut b = clamp(x0);
    let mut c = clamp(x0 + step);
    let mut ga = g(a);
    let mut gb = g(b);
    let mut gc = g(c);
    if !(ga.is_finite() && gb.is_finite() && gc.is_finite()) {
        return Err(AmpError::QuadratureFailed {
            context: "minimize_unimodal",
            detail: format!("objective not finite near x0 = {x0}"),
        });
    }
    // Slide the triple downhill, doubling the step, until the middle point is
    // no worse than both ends.
    while gb > ga || gb > gc {
        iters += 1;
        if iters > max_iter {
            return Err(AmpError::MinimizerFailed {
                iters,
                lo: a,
                hi: c,
                width: c - a,
            });
        }
        step *= 2.0;
        if ga < gc {
            c = b;
            gc = gb;
            b = a;
            gb = ga;
            a = clamp(b - step);
            ga = g(a);
            if a == b {
                break; // pinned at the domain edge
            }
        } else {
            a = b;
            ga = gb;
            b = c;
            gb = gc;
            c = clamp(b + step);
            gc = g(c);
            if c == b {
                break;
            }
        }
        if !(ga.is_finite() && gc.is_finite()) {
            return Err(AmpError::QuadratureFailed {
                context: "minimize_unimodal",
                detail: "objective became non-finite while bracketing".to_string(),
            });
        }
    }
    // Golden-section on [a, c].
    let mut lo = a;
    let mut hi = c;
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = g(x1);
    let mut f2 = g(x2);
    while hi - lo > tol {
        iters += 1;
        if iters > max_iter {
            return Err(AmpError::MinimizerFailed {
                iters,
                lo,
                hi,
                width: hi - lo,
            });
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = g(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = g(x2);
        }
    }
    let (xm, fm) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    Ok((xm, fm))
}

/// Proximal map without the `ScalarFunction` wrapper; `deriv` enables the
/// safeguarded Newton path on the stationarity equation.
pub(crate) fn prox_raw(
    eval: &dyn Fn(f64) -> f64,
    deriv: Option<&dyn Fn(f64) -> f64>,
    domain: (f64, f64),
    lambda: f64,
    x: f64,
    nu: &Numerics,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "prox smoothing parameter must be finite and >= 0, got {lambda}"
        )));
    }
    if !x.is_finite() {
        return Err(AmpError::InvalidArgument(format!(
            "prox argument must be finite, got {x}"
        )));
    }
    if lambda == 0.0 {
        return Ok(x.clamp(domain.0, domain.1));
    }
    match deriv {
        Some(d) => prox_newton(d, domain, lambda, x, nu),
        None => {
            let g = |y: f64| (x - y) * (x - y) / (2.0 * lambda) + eval(y);
            let (p, _) = minimize_unimodal(&g, x, lambda.max(1.0), domain, nu.prox_tol, nu.prox_max_iter)?;
            Ok(p)
        }
    }
}

/// Solves phi(y) = (y - x)/lambda + f'(y) = 0 by bracketed bisection with
/// Newton acceleration. phi is nondecreasing for convex f, so a sign-change
/// bracket pins the root even across subdifferential jumps.
fn prox_newton(
    d: &dyn Fn(f64) -> f64,
    domain: (f64, f64),
    lambda: f64,
    x: f64,
    nu: &Numerics,
) -> Result<f64> {
    let phi = |y: f64| (y - x) / lambda + d(y);
    let clamp = |v: f64| v.clamp(domain.0, domain.1);
    let mut iters = 0usize;

    // Bracket a sign change around the first-order guess.
    let guess = clamp(x - lambda * d(x));
    let mut step = (guess - x).abs().max(lambda.min(1.0)).max(16.0 * nu.prox_tol);
    let mut lo = clamp(guess - step);
    let mut hi = clamp(guess + step);
    let mut phi_lo = phi(lo);
    let mut phi_hi = phi(hi);
    while phi_lo > 0.0 || phi_hi < 0.0 {
        iters += 1;
        if iters > nu.prox_max_iter {
            return Err(AmpError::MinimizerFailed {
                iters,
                lo,
                hi,
                width: hi - lo,
            });
        }
        step *= 2.0;
        if phi_lo > 0.0 {
            hi = lo;
            phi_hi = phi_lo;
            lo = clamp(lo - step);
            phi_lo = phi(lo);
            if lo == hi {
                return Ok(lo); // root pinned at the domain edge
            }
        } else {
            lo = hi;
            phi_lo = phi_hi;
            hi = clamp(hi + step);
            phi_hi = phi(hi);
            if hi == lo {
                return Ok(hi);
            }
        }
        if !(phi_lo.is_finite() && phi_hi.is_finite()) {
            return Err(AmpError::QuadratureFailed {
                context: "prox_newton",
                detail: "stationarity function became non-finite while bracketing".to_string(),
            });
        }
    }

    let mut y = 0.5 * (lo + hi);
    let mut prev_width = hi - lo;
    while hi - lo > nu.prox_tol {
        iters += 1;
        if iters > nu.prox_max_iter {
            return Err(AmpError::MinimizerFailed {
                iters,
                lo,
                hi,
                width: hi - lo,
            });
        }
        let phi_y = phi(y);
        if phi_y == 0.0 {
            return Ok(y);
        }
        if phi_y > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        // Newton proposal with a finite-difference second derivative; fall
        // back to bisection whenever it is unusable, leaves the bracket, or
        // failed to halve the bracket since the last proposal. The halving
        // test guarantees termination when the root sits on a derivative
        // jump, where the finite-difference slope explodes and undamped
        // Newton steps would creep without ever closing the bracket.
        let h2 = nu.fd_step(y);
        let f2 = (d(y + h2) - d(y - h2)) / (2.0 * h2);
        let slope = 1.0 / lambda + f2;
        let newton = y - phi_y / slope;
        let halved = hi - lo <= 0.5 * prev_width;
        prev_width = hi - lo;
        y = if slope > 0.0 && newton > lo && newton < hi && halved {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(y)
}

/// Proximal map: the minimizer of (x - y)^2 / (2 lambda) + f(y).
///
/// At lambda = 0 this is the identity. Uses a closed form when the function
/// carries one, the safeguarded Newton root solve when a derivative is
/// attached, and bracketing plus golden-section refinement otherwise.
pub fn prox(f: &ScalarFunction, lambda: f64, x: f64, nu: &Numerics) -> Result<f64> {
    if lambda > 0.0 && lambda.is_finite() {
        if let Some((p, _)) = f.analytic_prox_at(lambda, x) {
            return Ok(p);
        }
    }
    prox_raw(
        &|y| f.eval(y),
        f.deriv.as_ref().map(|d| d as &dyn Fn(f64) -> f64),
        f.domain,
        lambda,
        x,
        nu,
    )
}

/// Proximal map together with its derivative in x.
///
/// The derivative comes from the attached closed form when there is one,
/// otherwise from the implicit-function formula 1 / (1 + lambda f''(p))
/// evaluated at the solved point.
pub fn prox_with_deriv(
    f: &ScalarFunction,
    lambda: f64,
    x: f64,
    nu: &Numerics,
) -> Result<(f64, f64)> {
    if lambda == 0.0 {
        return Ok((x, 1.0));
    }
    if lambda > 0.0 && lambda.is_finite() {
        if let Some(pair) = f.analytic_prox_at(lambda, x) {
            return Ok(pair);
        }
    }
    let p = prox(f, lambda, x, nu)?;
    let dp = 1.0 / (1.0 + lambda * f.deriv2_or_fd(p, nu));
    Ok((p, dp))
}

/// Moreau envelope value, gradient, and minimizer in one solve.
#[derive(Clone, Copy, Debug)]
pub struct MoreauParts {
    pub prox: f64,
    pub value: f64,
    pub grad: f64,
}

pub fn moreau_parts(f: &ScalarFunction, lambda: f64, x: f64, nu: &Numerics) -> Result<MoreauParts> {
    if lambda == 0.0 {
        return Ok(MoreauParts {
            prox: x,
            value: f.eval(x),
            grad: f.deriv_or_fd(x, nu),
        });
    }
    let p = prox(f, lambda, x, nu)?;
    Ok(MoreauParts {
        prox: p,
        value: (x - p) * (x - p) / (2.0 * lambda) + f.eval(p),
        grad: (x - p) / lambda,
    })
}

/// Moreau envelope: min over y of (x - y)^2 / (2 lambda) + f(y).
pub fn moreau(f: &ScalarFunction, lambda: f64, x: f64, nu: &Numerics) -> Result<f64> {
    Ok(moreau_parts(f, lambda, x, nu)?.value)
}

/// Gradient of the Moreau envelope, (x - prox) / lambda; equals f'(x) in the
/// lambda -> 0 limit.
pub fn moreau_grad(f: &ScalarFunction, lambda: f64, x: f64, nu: &Numerics) -> Result<f64> {
    Ok(moreau_parts(f, lambda, x, nu)?.grad)
}

// ----------------------------------------------------------------------
// Gaussian smoothing and posterior moments
// ----------------------------------------------------------------------

const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

/// log of integral exp(log_f(z)) N(z; center, var) dz.
///
/// Delegates to the full posterior-moment computation so the value agrees
/// bit for bit with `gauss_posterior_moments` at the same point. The
/// mean/variance agreement checks there catch node-doubling coincidences
/// that a log-value check alone can miss (two Gauss-Hermite rules can agree
/// on the integral while both are wrong near a kink).
pub(crate) fn log_gauss_convolution(
    log_f: &dyn Fn(f64) -> f64,
    var: f64,
    center: f64,
    nu: &Numerics,
) -> Result<f64> {
    Ok(gauss_posterior_moments(log_f, var, center, nu)?.log_norm)
}

/// Normalization, mean, and variance of the density proportional to
/// exp(log_f(z)) N(z; center, var).
#[derive(Clone, Copy, Debug)]
pub(crate) struct PosteriorMoments {
    /// log of the normalization integral (the smoothed density value).
    pub log_norm: f64,
    pub mean: f64,
    pub var: f64,
}

fn gh_posterior_once(
    log_f: &dyn Fn(f64) -> f64,
    var: f64,
    center: f64,
    n: usize,
) -> Option<PosteriorMoments> {
    let rule = hermite_rule(n);
    let scale = (2.0 * var).sqrt();
    let mut logs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    let mut max_l = f64::NEG_INFINITY;
    for (t, lw) in rule.nodes.iter().zip(&rule.log_weights) {
        let z = center + scale * t;
        let l = lw + log_f(z);
        if l > max_l {
            max_l = l;
        }
        logs.push(l);
        zs.push(z);
    }
    if !max_l.is_finite() {
        return None;
    }
    let mut d = 0.0;
    let mut m1 = 0.0;
    for (l, z) in logs.iter().zip(&zs) {
        let u = (l - max_l).exp();
        d += u;
        m1 += u * (z - center);
    }
    let mean = center + m1 / d;
    let mut m2c = 0.0;
    for (l, z) in logs.iter().zip(&zs) {
        let u = (l - max_l).exp();
        m2c += u * (z - mean) * (z - mean);
    }
    Some(PosteriorMoments {
        log_norm: max_l + d.ln() - HALF_LN_PI,
        mean,
        var: m2c / d,
    })
}

/// Posterior moments with the node-doubling check and Simpson fallback.
pub(crate) fn gauss_posterior_moments(
    log_f: &dyn Fn(f64) -> f64,
    var: f64,
    center: f64,
    nu: &Numerics,
) -> Result<PosteriorMoments> {
    if !(var.is_finite() && var >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "observation variance must be finite and >= 0, got {var}"
        )));
    }
    if var == 0.0 {
        return Ok(PosteriorMoments {
            log_norm: log_f(center),
            mean: center,
            var: 0.0,
        });
    }
    let a = gh_posterior_once(log_f, var, center, nu.gh_nodes);
    let b = gh_posterior_once(log_f, var, center, 2 * nu.gh_nodes);
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(AmpError::QuadratureFailed {
                context: "gauss_posterior_moments",
                detail: format!(
                    "integrand vanished on all quadrature nodes (center {center}, var {var})"
                ),
            })
        }
    };
    let sd = var.sqrt();
    let tol = nu.quad_check_tol;
    let agree = (a.log_norm - b.log_norm).abs() <= tol
        && (a.mean - b.mean).abs() <= tol * sd.max(1e-12)
        && (a.var - b.var).abs() <= tol * var;
    if agree {
        return Ok(b);
    }
    posterior_mode_fallback(log_f, var, center, nu)
}

/// Adaptive-Simpson fallback for the tilted-Gaussian moment integrals.
///
/// The Gauss-Hermite grid is anchored at the kernel mean, so when the
/// posterior concentrates far from it (very large `var`, informative
/// `log_f`) the nodes straddle the mass. This path locates the posterior
/// mode first, sizes a window from the local curvature, and integrates
/// adaptively there. The window is adequate for log-concave `log_f`, which
/// covers every density this crate constructs.
fn posterior_mode_fallback(
    log_f: &dyn Fn(f64) -> f64,
    var: f64,
    center: f64,
    nu: &Numerics,
) -> Result<PosteriorMoments> {
    let log_g = |z: f64| {
        log_f(z) - (z - center) * (z - center) / (2.0 * var)
            - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
    };
    let neg = |z: f64| -log_g(z);
    let mode_tol = 1e-8 * center.abs().max(var.sqrt()).max(1.0);
    let (mode, _) = minimize_unimodal(
        &neg,
        center,
        var.sqrt(),
        (f64::NEG_INFINITY, f64::INFINITY),
        mode_tol,
        300,
    )?;
    let shift = log_g(mode);
    if !shift.is_finite() {
        return Err(AmpError::QuadratureFailed {
            context: "gauss_posterior_moments",
            detail: format!("integrand not representable at its mode {mode}"),
        });
    }
    // Window: double outward from a curvature-based seed until the
    // log-integrand has dropped 40 nats below its peak on each side. The
    // curvature seed alone is unreliable (a kink at the mode makes the finite
    // difference blow up and the window collapse).
    let hstep = 1e-4 * mode.abs().max(1.0);
    let curv = ((neg(mode - hstep) - 2.0 * neg(mode) + neg(mode + hstep)) / (hstep * hstep))
        .max(0.5 / var);
    let seed = curv.recip().sqrt();
    let drop = 40.0;
    let grow = |dir: f64| -> f64 {
        let mut r = seed;
        for _ in 0..80 {
            if log_g(mode + dir * r) <= shift - drop {
                break;
            }
            r *= 2.0;
        }
        r
    };
    let lo = mode - grow(-1.0);
    let hi = mode + grow(1.0);
    let w = |z: f64| (log_g(z) - shift).exp();
    // Rough composite scan to size the absolute tolerances off the actual
    // magnitudes of the three integrals.
    let (d_rough, sd_rough) = {
        let n = 800;
        let h = (hi - lo) / n as f64;
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..=n {
            let z = lo + i as f64 * h;
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            let v = wi * w(z);
            s0 += v;
            s1 += v * (z - mode);
            s2 += v * (z - mode) * (z - mode);
        }
        let mean_r = s1 / s0;
        let var_r = (s2 / s0 - mean_r * mean_r).max(1e-6 * seed * seed);
        (s0 * h, var_r.sqrt())
    };
    if !(d_rough.is_finite() && d_rough > 0.0) {
        return Err(AmpError::QuadratureFailed {
            context: "gauss_posterior_moments",
            detail: format!("fallback scan returned mass {d_rough:e}"),
        });
    }
    let tol0 = nu.simpson_rel_tol.max(1e-13) * d_rough;
    let d = crate::quad::adaptive_simpson_panels(&w, lo, hi, 32, tol0, 40);
    if !(d.is_finite() && d > 0.0) {
        return Err(AmpError::QuadratureFailed {
            context: "gauss_posterior_moments",
            detail: format!("Simpson normalization returned {d:e}"),
        });
    }
    let m1 =
        crate::quad::adaptive_simpson_panels(&|z| (z - mode) * w(z), lo, hi, 32, tol0 * sd_rough, 40);
    let mean = mode + m1 / d;
    let m2c = crate::quad::adaptive_simpson_panels(
        &|z| (z - mean) * (z - mean) * w(z),
        lo,
        hi,
        32,
        tol0 * sd_rough * sd_rough,
        40,
    );
    Ok(PosteriorMoments {
        log_norm: shift + d.ln(),
        mean,
        var: (m2c / d).max(0.0),
    })
}

/// log of the Gaussian-smoothed density exp(logp) convolved with N(0, lambda),
/// evaluated at x. The result is normalized as a density in x whenever logp
/// is a normalized log-density. lambda = 0 returns logp(x) exactly.
pub fn gaussian_smooth_log_density(
    logp: &ScalarFunction,
    lambda: f64,
    x: f64,
    nu: &Numerics,
) -> Result<f64> {
    log_gauss_convolution(&|z| logp.eval(z), lambda, x, nu)
}

/// Posterior mean of s under prior `prior` given the observation
/// h = s + sqrt(lambda) w with w ~ N(0, 1).
pub fn scalar_posterior_mean(prior: &Prior, lambda: f64, h: f64, nu: &Numerics) -> Result<f64> {
    Ok(prior_posterior_moments(prior, lambda, h, nu)?.mean)
}

/// Full posterior moments for the same observation model; the variance gives
/// both the MMSE integrand and the posterior-mean derivative (var / lambda).
///
/// Both built-in priors admit closed forms, so no quadrature runs here. That
/// matters beyond speed: the generic Gauss-Hermite route cannot see the kink
/// of the Laplace density between its nodes, and its O(1e-7) wiggle is
/// enough to leave visible non-convexity in second differences of tables
/// built on top of these values. The quadrature route stays available
/// through `gauss_posterior_moments` and the tests hold the two together.
pub(crate) fn prior_posterior_moments(
    prior: &Prior,
    lambda: f64,
    h: f64,
    _nu: &Numerics,
) -> Result<PosteriorMoments> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "observation variance must be finite and >= 0, got {lambda}"
        )));
    }
    if !h.is_finite() {
        return Err(AmpError::InvalidArgument(format!(
            "observation must be finite, got {h}"
        )));
    }
    if lambda == 0.0 {
        return Ok(PosteriorMoments {
            log_norm: prior.log_density(h),
            mean: h,
            var: 0.0,
        });
    }
    Ok(match *prior {
        Prior::Gaussian { variance } => gaussian_prior_moments(variance, lambda, h),
        Prior::Laplace { scale } => laplace_prior_moments(scale, lambda, h),
    })
}

/// Moments of s ~ N(0, variance) given h = s + sqrt(lambda) w: a product of
/// Gaussians, everything in closed form.
fn gaussian_prior_moments(variance: f64, lambda: f64, h: f64) -> PosteriorMoments {
    let total = variance + lambda;
    PosteriorMoments {
        log_norm: -0.5 * h * h / total - 0.5 * (2.0 * std::f64::consts::PI * total).ln(),
        mean: variance / total * h,
        var: variance * lambda / total,
    }
}

/// Moments of s ~ Laplace(scale) given h = s + sqrt(lambda) w.
///
/// Completing the square on each side of the kink makes the posterior a
/// two-component mixture of Gaussians truncated at zero, with branch
/// centers h -+ lambda/scale. Branch masses and truncated moments reduce to
/// erfc and the Gaussian hazard sqrt(2/pi) / erfcx, both stable across the
/// whole range; the mixture variance uses the grouped form that avoids
/// cancelling the large squared means.
fn laplace_prior_moments(scale: f64, lambda: f64, h: f64) -> PosteriorMoments {
    let sd = lambda.sqrt();
    let tilt = lambda / (2.0 * scale * scale);
    // Branch centers after completing the square, and the standardized
    // truncation points seen from each center.
    let mu_pos = h - lambda / scale;
    let mu_neg = h + lambda / scale;
    let a_pos = -mu_pos / sd;
    let a_neg = mu_neg / sd;
    // Log masses of the s > 0 and s < 0 branches (up to the shared
    // -log(2 scale) normalization added at the end).
    let log_w_pos = tilt - h / scale + ln_erfc(a_pos / SQRT_2) - LN_2;
    let log_w_neg = tilt + h / scale + ln_erfc(a_neg / SQRT_2) - LN_2;
    let log_norm = log_sum_exp(&[log_w_pos, log_w_neg]);
    let w_pos = (log_w_pos - log_norm).exp();
    let w_neg = (log_w_neg - log_norm).exp();

    // Moments of N(mu, lambda) truncated to the kept side, via the hazard
    // ratio r(a) = phi(a) / Phi(-a) at the standardized cut.
    let hazard = |a: f64| (2.0 / std::f64::consts::PI).sqrt() / erfcx(a / SQRT_2);
    let r_pos = hazard(a_pos);
    let r_neg = hazard(a_neg);
    let mean_pos = mu_pos + sd * r_pos;
    let mean_neg = mu_neg - sd * r_neg;
    let var_pos = lambda * (1.0 + a_pos * r_pos - r_pos * r_pos).max(0.0);
    let var_neg = lambda * (1.0 + a_neg * r_neg - r_neg * r_neg).max(0.0);

    let mean = w_pos * mean_pos + w_neg * mean_neg;
    let spread = mean_pos - mean_neg;
    let var = w_pos * var_pos + w_neg * var_neg + w_pos * w_neg * spread * spread;
    PosteriorMoments {
        log_norm: log_norm - (2.0 * scale).ln(),
        mean,
        var,
    }
}

/// Minimum mean squared error of estimating s ~ prior from
/// h = s + sqrt(q_h) w: the expected posterior variance under the marginal
/// law of h (outer quadrature over the smoothed marginal, inner posterior
/// moments).
pub fn scalar_mmse_error(prior: &Prior, q_h: f64, nu: &Numerics) -> Result<f64> {
    if !(q_h.is_finite() && q_h >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "q_h must be finite and >= 0, got {q_h}"
        )));
    }
    if q_h == 0.0 {
        return Ok(0.0);
    }
    let big_v = prior.variance() + q_h;
    let log_term = |h: f64| -> Result<f64> {
        let m = prior_posterior_moments(prior, q_h, h, nu)?;
        if m.var <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(m.log_norm + m.var.ln())
    };
    let once = |n: usize| -> Result<f64> {
        let rule = hermite_rule(n);
        let scale = (2.0 * big_v).sqrt();
        let mut terms = Vec::with_capacity(n);
        for (t, lw) in rule.nodes.iter().zip(&rule.log_weights) {
            let h = scale * t;
            terms.push(lw + t * t + log_term(h)? + 0.5 * (2.0 * big_v).ln());
        }
        Ok(log_sum_exp(&terms).exp())
    };
    let v1 = once(nu.gh_nodes)?;
    let v2 = once(2 * nu.gh_nodes)?;
    if (v1 - v2).abs() <= nu.quad_check_tol * v2.abs().max(1e-12) {
        return Ok(v2);
    }
    // Rarely needed: the marginal of h is smooth. Integrate the plain
    // integrand adaptively over a window wide enough for heavy prior tails.
    let half = 12.0 * big_v.sqrt() + 12.0 * q_h.sqrt();
    let f = |h: f64| match log_term(h) {
        Ok(l) => l.exp(),
        Err(_) => f64::NAN,
    };
    let val = crate::quad::adaptive_simpson_panels(&f, -half, half, 32, nu.simpson_rel_tol * big_v, 40);
    if !val.is_finite() || val < 0.0 {
        return Err(AmpError::QuadratureFailed {
            context: "scalar_mmse_error",
            detail: format!("fallback integration returned {val:e}"),
        });
    }
    Ok(val)
}

/// Expectation of a function of x ~ N(mean, var) with the node-doubling
/// check; falls back to adaptive Simpson against the explicit Gaussian weight.
pub(crate) fn gauss_expectation(
    g: &dyn Fn(f64) -> Result<f64>,
    mean: f64,
    var: f64,
    nu: &Numerics,
    context: &'static str,
) -> Result<f64> {
    if !(var.is_finite() && var >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "expectation variance must be finite and >= 0, got {var}"
        )));
    }
    if var == 0.0 {
        return g(mean);
    }
    let once = |n: usize| -> Result<f64> {
        let rule = hermite_rule(n);
        let scale = (2.0 * var).sqrt();
        let mut acc = 0.0;
        for (t, w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * g(mean + scale * t)?;
        }
        Ok(acc / std::f64::consts::PI.sqrt())
    };
    let v1 = once(nu.gh_nodes)?;
    let v2 = once(2 * nu.gh_nodes)?;
    if (v1 - v2).abs() <= nu.quad_check_tol * v2.abs().max(1.0) {
        return Ok(v2);
    }
    let sd = var.sqrt();
    let f = |x: f64| match g(x) {
        Ok(v) => {
            v * (-(x - mean) * (x - mean) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt()
        }
        Err(_) => f64::NAN,
    };
    let val = crate::quad::adaptive_simpson_panels(
        &f,
        mean - 12.0 * sd,
        mean + 12.0 * sd,
        32,
        nu.simpson_rel_tol * v2.abs().max(1.0),
        40,
    );
    if !val.is_finite() {
        return Err(AmpError::QuadratureFailed {
            context,
            detail: format!("fallback integration returned {val:e}"),
        });
    }
    Ok(val)
}

/// Average Fisher information of the smoothed observation family: the
/// expectation of -d^2/d eta^2 log P_y(y | eta, q) with eta ~ N(0, eta_var)
/// and y drawn from the smoothed channel at the same eta.
///
/// The second derivative is computed from posterior moments of the latent
/// predictor ((q - Var) / q^2), which is exact given the quadrature; q = 0
/// reduces to the classical averaged Fisher information of the raw channel.
pub fn avg_fisher_info(channel: &Channel, q: f64, eta_var: f64, nu: &Numerics) -> Result<f64> {
    if !(q.is_finite() && q >= 0.0) {
        return Err(AmpError::InvalidArgument(format!(
            "smoothing level q must be finite and >= 0, got {q}"
        )));
    }
    let local = |eta: f64| -> Result<f64> {
        if q == 0.0 {
            return Ok(match channel {
                Channel::LinearGaussian { noise_variance } => 1.0 / noise_variance,
                // Both symbols share the same curvature, so the y-average is
                // free.
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
                    let m = gauss_posterior_moments(&|z| channel.log_likelihood(y, z), q, eta, nu)?;
                    acc += m.log_norm.exp() * (q - m.var) / (q * q);
                }
                Ok(acc)
            }
            None => match channel {
                Channel::LinearGaussian { noise_variance } => {
                    // y | eta is Gaussian with variance noise + q; average the
                    // numerically computed curvature over it.
                    let g = |y: f64| -> Result<f64> {
                        let m =
                            gauss_posterior_moments(&|z| channel.log_likelihood(y, z), q, eta, nu)?;
                        Ok((q - m.var) / (q * q))
                    };
                    gauss_expectation(&g, eta, noise_variance + q, nu, "avg_fisher_info")
                }
                Channel::Logistic => unreachable!("logistic channel is binary"),
            },
        }
    };
    gauss_expectation(&local, 0.0, eta_var, nu, "avg_fisher_info")
}
