//! Continuous diffusion language modelling: learned noise schedules, a variational
//! likelihood bound, ancestral sampling with score temperature and token guidance, and
//! IsoFLOP scaling fits.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod model;
pub mod objective;
pub mod sampler;
pub mod scaling;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{PackedDataset, Vocabulary};
pub use denoiser::{DenoiserConfig, SelfCond};
pub use diffusion::NoiseSchedule;
pub use embedding::TokenId;
pub use error::{Error, Result};
pub use model::Model;
pub use objective::{eval_nll, EvalOptions, EvalReport, TokenBatch, VlbEstimate};
pub use sampler::{sample, GuidanceSpec, GuidanceTerm, SampleOutput, SamplerConfig};
pub use scaling::{fit_isoflop, fit_power_law, IsoFlopPoint, PowerLawFit};
pub use tensor::Mat;
pub use trainer::{train_loop, train_step, StepMetrics, TrainConfig, TrainState};
