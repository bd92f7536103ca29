use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion time {0} outside [0, 1]")]
    TimeDomain(f64),
    #[error("posterior requires s < t, got s = {s}, t = {t}")]
    TimeOrder { s: f64, t: f64 },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid size: {0}")]
    Size(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid guidance spec: {0}")]
    Spec(String),
    #[error("guidance produced a non-finite gradient at t = {0}")]
    Guidance(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("quadratic fit has non-positive curvature {0}; no minimum")]
    NoMinimum(f64),
    #[error("non-finite loss at step {step}: prior_kl={prior_kl} recon={recon} diffusion={diffusion}")]
    NonFiniteLoss { step: u64, prior_kl: f64, recon: f64, diffusion: f64 },
    #[error("step {step} outside [0, {total}]")]
    StepRange { step: u64, total: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found}; expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
