use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the simulation, solver and derivative machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("mark {0} is not in the measure support")]
    UnknownMark(f64),

    #[error("invalid kernel: {0}")]
    Kernel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("jump sampler failed: {0}")]
    Sampler(String),

    #[error(
        "inner Picard iteration failed to contract at step {step} \
         (residual {residual:.3e} after {iters} iterations); reduce the time step"
    )]
    Contraction {
        step: usize,
        residual: f64,
        iters: usize,
    },

    #[error("regression basis error: {0}")]
    Basis(String),

    #[error("forward state diverged at step {step}: {value}")]
    Divergence { step: usize, value: f64 },

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("direction v must be nonzero for the jump channel; use the Brownian-channel machinery for v = 0")]
    ZeroDirection,

    #[error("derivative field coverage: {0}")]
    Coverage(String),

    #[error("tree enumeration budget exceeded: {outcomes} outcomes > {budget}")]
    TreeSize { outcomes: usize, budget: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}
