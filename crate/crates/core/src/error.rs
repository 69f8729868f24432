use thiserror::Error;

/// Errors produced by the numerical core and the experiment harness.
#[derive(Debug, Error)]
pub enum AmpError {
    /// The 1-D minimizer (or prox root solve) ran out of iterations.
    #[error(
        "1-d minimizer did not converge after {iters} iterations \
         (bracket [{lo:.6e}, {hi:.6e}], width {width:.3e})"
    )]
    MinimizerFailed {
        iters: usize,
        lo: f64,
        hi: f64,
        width: f64,
    },

    /// A quadrature produced a non-finite or self-inconsistent result.
    #[error("quadrature failed in {context}: {detail}")]
    QuadratureFailed {
        context: &'static str,
        detail: String,
    },

    /// A model handed to the matched construction is not log-concave.
    #[error(
        "{what} is not log-concave: second derivative reaches {max_second:.3e} at x = {at:.4}"
    )]
    NotLogConcave {
        what: String,
        max_second: f64,
        at: f64,
    },

    /// The smoothed log-density curvature is too close to -1/lambda for the
    /// envelope deconvolution to be well posed.
    #[error(
        "near-singular deconvolution at x = {at:.4}: smoothed log-density curvature \
         {curvature:.6e} is within {margin:.3e} of the limit -1/lambda = {limit:.6e}"
    )]
    SingularDeconvolution {
        at: f64,
        curvature: f64,
        limit: f64,
        margin: f64,
    },

    /// Message passing produced a non-finite iterate.
    #[error("message passing diverged at iteration {iteration} ({detail})")]
    Diverged { iteration: usize, detail: String },

    /// Damped fixed-point iteration of the state recursion did not converge.
    #[error(
        "state recursion fixed point did not converge after {iters} iterations \
         (last q_s step {q_s_prev:.8e} -> {q_s_last:.8e})"
    )]
    FixedPointNotConverged {
        iters: usize,
        q_s_prev: f64,
        q_s_last: f64,
    },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file is malformed or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// One or more built-in verification suites failed.
    #[error("selftest failed: {0}")]
    SelftestFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmpError>;

impl AmpError {
    /// Process exit code for the CLI: usage and config problems map to 1,
    /// failed verification suites to 3, anything else that went wrong while
    /// computing to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmpError::Config(_) | AmpError::InvalidArgument(_) => 1,
            AmpError::SelftestFailed(_) => 3,
            _ => 2,
        }
    }
}
