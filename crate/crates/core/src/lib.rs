//! Approximate message passing for generalized linear observation models.
//!
//! The crate is organized bottom-up:
//!
//! - [`quad`]: Gauss-Hermite rules, log-sum-exp, adaptive Simpson.
//! - [`scalar`]: proximal maps, Moreau envelopes, Gaussian smoothing,
//!   posterior moments, scalar MMSE and Fisher information.
//! - [`models`]: signal priors and observation channels.
//! - [`rng`]: addressed ChaCha8 streams for reproducible experiments.
//! - [`linalg`]: dense matrix products and the ridge baseline.
//! - [`optimal`]: construction of smoothed loss/regularizer tables.
//! - [`gamp`]: the iteration engine and its two corrector families.
//! - [`se`]: the scalar state-evolution recursion and its fixed point.
//! - [`datagen`]: synthetic instances with documented binary dumps.
//! - [`harness`]: config-driven experiment commands behind the `amp` binary.

pub mod datagen;
pub mod error;
pub mod gamp;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod optimal;
pub mod quad;
pub mod rng;
pub mod scalar;
pub mod se;

pub use error::{AmpError, Result};
