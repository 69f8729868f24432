//! Shared quadrature machinery: Gauss-Hermite rules, adaptive Simpson
//! integration, and log-domain accumulation helpers.
//!
//! The Gauss-Hermite rules here are the physicists' convention: nodes t_i and
//! weights w_i such that `integral f(t) exp(-t^2) dt ~ sum_i w_i f(t_i)`.
//! Gaussian expectations are obtained by the substitution x = c + sqrt(2 v) t.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{AmpError, Result};

#[derive(Debug, Clone)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
}

/// 1/pi^(1/4), the seed of the orthonormal Hermite recurrence.
const PI_M4: f64 = 0.751_125_544_464_942_5;

fn hermite_rule_uncached(n: usize) -> HermiteRule {
    assert!(n >= 2, "Gauss-Hermite rule needs at least 2 nodes");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    let mut z_older = 0.0_f64;
    for i in 0..m {
        // Standard initial guesses for the largest roots, then a linear
        // extrapolation from the previous two roots inward.
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * z_older,
            3 => 1.91 * z - 0.91 * z_older,
            _ => 2.0 * z - z_older,
        };
        if i >= 2 {
            z_older = nodes[i - 1];
        } else if i == 1 {
            z_older = nodes[0];
        }
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..200 {
            // Orthonormal recurrence: values stay O(1) even for large n.
            let mut p1 = PI_M4;
            let mut p2 = 0.0_f64;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z_old = z;
            z = z_old - p1 / pp;
            if (z - z_old).abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        assert!(converged, "Hermite node Newton iteration failed for n = {n}");
        if i < 2 {
            z_older = if i == 0 { z } else { nodes[0] };
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        let w = 2.0 / (pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[m - 1] = 0.0;
    }
    // Ascending node order reads naturally in downstream loops.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    let nodes_sorted: Vec<f64> = idx.iter().map(|&k| nodes[k]).collect();
    let weights_sorted: Vec<f64> = idx.iter().map(|&k| weights[k]).collect();
    let log_weights = weights_sorted.iter().map(|w| w.ln()).collect();
    HermiteRule {
        nodes: nodes_sorted,
        weights: weights_sorted,
        log_weights,
    }
}

/// Cached Gauss-Hermite rule with `n` nodes.
pub fn hermite_rule(n: usize) -> Arc<HermiteRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("hermite rule cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(hermite_rule_uncached(n)))
        .clone()
}

/// log(sum_i exp(x_i)) without overflow; returns -inf for an empty or
/// all -inf input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let delta = left + right - whole;
    // Second acceptance clause: once the halved-interval correction is at the
    // rounding floor of the local sum, further splitting only chases noise.
    if depth == 0
        || delta.abs() <= 15.0 * tol
        || delta.abs() <= 1e-13 * (left.abs() + right.abs())
    {
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integration of `f` over [a, b] to absolute tolerance
/// `tol`, with recursion depth capped at `max_depth`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_depth: usize) -> f64 {
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    adaptive_simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

/// Adaptive Simpson over `panels` equal subintervals. A narrow feature can
/// sit between the three seed points of a single adaptive call and be
/// accepted as zero; pre-splitting guarantees it is sampled before any
/// acceptance decision.
pub fn adaptive_simpson_panels(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    panels: usize,
    tol: f64,
    max_depth: usize,
) -> f64 {
    let k = panels.max(1);
    let h = (b - a) / k as f64;
    let tol_panel = tol / k as f64;
    let mut acc = 0.0;
    for i in 0..k {
        let lo = a + i as f64 * h;
        let hi = if i + 1 == k { b } else { lo + h };
        acc += adaptive_simpson(f, lo, hi, tol_panel, max_depth);
    }
    acc
}

/// Integrates exp(log_f(x)) over [a, b] by max-shifted adaptive Simpson and
/// returns the log of the integral. `log_shift_hint` should be an estimate of
/// the maximum of log_f over the window (e.g. from quadrature nodes already
/// evaluated); it only affects conditioning, not correctness.
pub fn log_integral_simpson(
    log_f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    log_shift_hint: f64,
    rel_tol: f64,
    context: &'static str,
) -> Result<f64> {
    let shift = if log_shift_hint.is_finite() {
        log_shift_hint
    } else {
        0.0
    };
    let g = |x: f64| {
        let v = log_f(x) - shift;
        if v.is_finite() {
            v.exp()
        } else if v == f64::NEG_INFINITY {
            0.0
        } else {
            f64::NAN
        }
    };
    // The shifted integrand peaks near 1, so a relative tolerance doubles as
    // an absolute one.
    let val = adaptive_simpson(&g, a, b, rel_tol, 40);
    if !val.is_finite() || val < 0.0 {
        return Err(AmpError::QuadratureFailed {
            context,
            detail: format!("adaptive Simpson returned {val:e} on [{a}, {b}]"),
        });
    }
    if val == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(shift + val.ln())
}

/// Switch point between `exp(t^2) erfc(t)` computed through logs and the
/// asymptotic series: erfc(t) is still a normal double at 26 but exp(t^2)
/// overflows just past it.
const ERFCX_ASYMPTOTIC_CUT: f64 = 26.0;

/// Truncated asymptotic series for erfcx(t), valid for large positive t:
/// (1 - 1/(2t^2) + 3/(4t^4) - ...) / (t sqrt(pi)). Eight terms leave a
/// relative error below 1e-18 at the switch point.
fn erfcx_asymptotic(t: f64) -> f64 {
    let inv2t2 = 0.5 / (t * t);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8u32 {
        term *= -((2 * k - 1) as f64) * inv2t2;
        sum += term;
    }
    sum / (t * std::f64::consts::PI.sqrt())
}

/// Scaled complementary error function exp(t^2) erfc(t).
///
/// Decays like 1/(t sqrt(pi)) for large positive t instead of underflowing,
/// which keeps Gaussian hazard ratios representable. Overflows to infinity
/// for t below about -26.6, where exp(t^2) itself leaves the double range.
pub fn erfcx(t: f64) -> f64 {
    if t > ERFCX_ASYMPTOTIC_CUT {
        erfcx_asymptotic(t)
    } else {
        (t * t + libm::erfc(t).ln()).exp()
    }
}

/// log of erfc(t), valid across the full double range of t: direct where
/// erfc is representable, asymptotic (-t^2 - log(t sqrt(pi)) + series)
/// beyond it.
pub fn ln_erfc(t: f64) -> f64 {
    if t > ERFCX_ASYMPTOTIC_CUT {
        erfcx_asymptotic(t).ln() - t * t
    } else {
        libm::erfc(t).ln()
    }
}
