//! Synthetic instance generation: dense Gaussian designs, planted signals,
//! and channel observations, all addressed by (seed, trial) so that any
//! instance can be regenerated exactly.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmpError, Result};
use crate::gamp::ProblemInstance;
use crate::linalg::DenseMatrix;
use crate::models::{Channel, Prior};
use crate::rng::{stream, StreamRole};

/// Shape and model of one experiment family. N is derived as round(alpha*P);
/// the realized measurement density is N/P after rounding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub p: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub prior: Prior,
    pub channel: Channel,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(AmpError::InvalidArgument("P must be at least 1".to_string()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.n() == 0 {
            return Err(AmpError::InvalidArgument(format!(
                "alpha = {} with P = {} rounds to zero measurements",
                self.alpha, self.p
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(AmpError::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        (self.alpha * self.p as f64).round() as usize
    }

    pub fn realized_alpha(&self) -> f64 {
        self.n() as f64 / self.p as f64
    }
}

/// Draws one instance: X with iid N(0, gamma/P) entries so each row has
/// expected squared norm gamma, the signal from the prior, observations from
/// the channel at z = X s. The three draw sites use disjoint streams of
/// (seed, trial), so regenerating any trial is independent of the others.
pub fn generate_instance(cfg: &GenConfig, trial: u64) -> Result<ProblemInstance> {
    cfg.validate()?;
    let (n, p) = (cfg.n(), cfg.p);
    let mut mrng = stream(cfg.seed, trial, StreamRole::Matrix);
    let x = DenseMatrix::gaussian(n, p, (cfg.gamma / p as f64).sqrt(), &mut mrng);
    let mut srng = stream(cfg.seed, trial, StreamRole::Signal);
    let s: Vec<f64> = (0..p).map(|_| cfg.prior.sample(&mut srng)).collect();
    let mut crng = stream(cfg.seed, trial, StreamRole::Channel);
    let z = x.matvec(&s);
    let y: Vec<f64> = z.iter().map(|&zi| cfg.channel.sample(zi, &mut crng)).collect();
    ProblemInstance::new(x, y, cfg.gamma, Some(s))
}

const MAGIC: &[u8; 8] = b"ampinst1";

/// Writes an instance as a flat binary container (all fields little-endian:
/// magic, P and N as u64, gamma as f64, seed as u64, then X row-major, y,
/// and the planted signal as f64) plus a JSON sidecar with the config at
/// `<path>.json`.
pub fn write_instance(path: &Path, inst: &ProblemInstance, cfg: &GenConfig) -> Result<()> {
    let s_true = inst.s_true.as_ref().ok_or_else(|| {
        AmpError::InvalidArgument("instance dump needs the planted signal".to_string())
    })?;
    let (n, p) = (inst.n(), inst.p());
    let mut buf = Vec::with_capacity(8 + 32 + 8 * (n * p + n + p));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(p as u64).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&inst.gamma.to_le_bytes());
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    for i in 0..n {
        for j in 0..p {
            buf.extend_from_slice(&inst.x.get(i, j).to_le_bytes());
        }
    }
    for v in &inst.y {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in s_true {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    let sidecar = path.with_extension(match path.extension() {
        Some(e) => format!("{}.json", e.to_string_lossy()),
        None => "json".to_string(),
    });
    fs::write(&sidecar, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn read_u64(buf: &[u8], at: &mut usize) -> Result<u64> {
    let end = *at + 8;
    let bytes: [u8; 8] = buf
        .get(*at..end)
        .ok_or_else(|| AmpError::InvalidArgument("instance file truncated".to_string()))?
        .try_into()
        .expect("slice of length 8");
    *at = end;
    Ok(u64::from_le_bytes(bytes))
}

fn read_f64(buf: &[u8], at: &mut usize) -> Result<f64> {
    Ok(f64::from_bits(read_u64(buf, at)?))
}

/// Reads a container written by [`write_instance`]. Returns the instance and
/// the seed recorded in the header.
pub fn read_instance(path: &Path) -> Result<(ProblemInstance, u64)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != MAGIC {
        return Err(AmpError::InvalidArgument(format!(
            "{} is not an instance container",
            path.display()
        )));
    }
    let mut at = 8usize;
    let p = read_u64(&buf, &mut at)? as usize;
    let n = read_u64(&buf, &mut at)? as usize;
    let gamma = read_f64(&buf, &mut at)?;
    let seed = read_u64(&buf, &mut at)?;
    let expected = at + 8 * (n * p + n + p);
    if buf.len() != expected {
        return Err(AmpError::InvalidArgument(format!(
            "instance file has {} bytes, expected {expected} for P = {p}, N = {n}",
            buf.len()
        )));
    }
    let mut xs = Vec::with_capacity(n * p);
    for _ in 0..n * p {
        xs.push(read_f64(&buf, &mut at)?);
    }
    let x = DenseMatrix::from_vec(n, p, xs)?;
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        y.push(read_f64(&buf, &mut at)?);
    }
    let mut s = Vec::with_capacity(p);
    for _ in 0..p {
        s.push(read_f64(&buf, &mut at)?);
    }
    Ok((ProblemInstance::new(x, y, gamma, Some(s))?, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(p: usize, alpha: f64, seed: u64) -> GenConfig {
        GenConfig {
            p,
            alpha,
            gamma: 1.0,
            prior: Prior::laplace(1.0).unwrap(),
            channel: Channel::logistic(),
            seed,
        }
    }

    #[test]
    fn rounding_and_realized_alpha() {
        let c = cfg(3, 0.5, 1);
        assert_eq!(c.n(), 2); // 1.5 rounds away from zero
        assert_abs_diff_eq!(c.realized_alpha(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(cfg(0, 1.0, 1).validate().is_err());
        assert!(cfg(4, 0.01, 1).validate().is_err()); // N rounds to zero
    }

    #[test]
    fn same_seed_reproduces_identical_instances() {
        let c = cfg(6, 2.0, 42);
        let a = generate_instance(&c, 3).unwrap();
        let b = generate_instance(&c, 3).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.s_true, b.s_true);
        for i in 0..a.n() {
            for j in 0..a.p() {
                assert_eq!(a.x.get(i, j).to_bits(), b.x.get(i, j).to_bits());
            }
        }
        let other = generate_instance(&c, 4).unwrap();
        assert_ne!(a.y, other.y);
    }

    #[test]
    fn row_norms_average_to_gamma() {
        // Mean of |x_mu|^2 over many regenerated small instances.
        let mut acc = 0.0;
        let mut rows = 0usize;
        for trial in 0..10_000u64 {
            let c = cfg(4, 2.0, 7);
            let inst = generate_instance(&c, trial).unwrap();
            for i in 0..inst.n() {
                let mut r = 0.0;
                for j in 0..inst.p() {
                    r += inst.x.get(i, j) * inst.x.get(i, j);
                }
                acc += r;
                rows += 1;
            }
        }
        let mean = acc / rows as f64;
        assert!(
            (mean - 1.0).abs() <= 0.02,
            "mean row squared norm {mean} should be 1 within 2%"
        );
    }

    #[test]
    fn entry_variance_matches_the_design_scale() {
        let c = GenConfig {
            p: 1000,
            alpha: 0.1,
            gamma: 2.5,
            prior: Prior::gaussian(1.0).unwrap(),
            channel: Channel::logistic(),
            seed: 11,
        };
        let inst = generate_instance(&c, 0).unwrap();
        let mut acc = 0.0;
        for i in 0..inst.n() {
            for j in 0..inst.p() {
                acc += inst.x.get(i, j) * inst.x.get(i, j);
            }
        }
        let var = acc / (inst.n() * inst.p()) as f64;
        let expect = 2.5 / 1000.0;
        assert!(
            (var / expect - 1.0).abs() <= 0.02,
            "entry variance {var} should be {expect} within 2%"
        );
    }

    #[test]
    fn gaussian_channel_noise_has_the_configured_variance() {
        let noise = 0.7;
        let c = GenConfig {
            p: 16,
            alpha: 625.0, // N = 10000
            gamma: 1.0,
            prior: Prior::gaussian(1.0).unwrap(),
            channel: Channel::linear_gaussian(noise).unwrap(),
            seed: 5,
        };
        let inst = generate_instance(&c, 0).unwrap();
        let z = inst.x.matvec(inst.s_true.as_ref().unwrap());
        let mut acc = 0.0;
        for (yi, zi) in inst.y.iter().zip(&z) {
            acc += (yi - zi) * (yi - zi);
        }
        let var = acc / inst.n() as f64;
        assert!(
            (var / noise - 1.0).abs() <= 0.02,
            "residual variance {var} should be {noise} within 2%"
        );
    }

    #[test]
    fn predictor_variance_matches_gamma_sigma_s2() {
        // z_mu = x_mu . s has variance gamma sigma_s^2 over the matrix draw;
        // at N = 1e4 the empirical average is within 3 standard errors.
        let c = GenConfig {
            p: 50,
            alpha: 200.0, // N = 10000
            gamma: 1.3,
            prior: Prior::laplace(1.0).unwrap(), // variance 2
            channel: Channel::logistic(),
            seed: 9,
        };
        let inst = generate_instance(&c, 0).unwrap();
        let s = inst.s_true.as_ref().unwrap();
        let s2: f64 = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        // Condition on the drawn signal: var(z) = gamma * |s|^2 / P exactly.
        let expect = 1.3 * s2;
        let z = inst.x.matvec(s);
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        let se = expect * (2.0f64 / z.len() as f64).sqrt();
        assert!(
            (var - expect).abs() <= 3.0 * se,
            "predictor variance {var} vs {expect} (se {se})"
        );
    }

    #[test]
    fn instance_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trial0.bin");
        let c = GenConfig {
            p: 5,
            alpha: 1.6,
            gamma: 0.9,
            prior: Prior::laplace(0.8).unwrap(),
            channel: Channel::linear_gaussian(0.4).unwrap(),
            seed: 77,
        };
        let inst = generate_instance(&c, 2).unwrap();
        write_instance(&path, &inst, &c).unwrap();
        let (back, seed) = read_instance(&path).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(back.n(), inst.n());
        assert_eq!(back.p(), inst.p());
        assert_eq!(back.y, inst.y);
        assert_eq!(back.s_true, inst.s_true);
        for i in 0..inst.n() {
            for j in 0..inst.p() {
                assert_eq!(back.x.get(i, j).to_bits(), inst.x.get(i, j).to_bits());
            }
        }
        let sidecar: GenConfig =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("bin.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar.seed, 77);
        assert_eq!(sidecar.p, 5);

        // Truncated file rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(read_instance(&bad).is_err());
    }
}
