//! Continuous diffusion over token embeddings for sequence-to-sequence tasks.
//!
//! The crate covers noise schedules, the embedding table and its clipping
//! threshold, a small encoder–decoder denoiser with its own reverse-mode
//! differentiation, DDIM and condition-enhanced samplers with length beams and
//! MBR selection, diagnostic experiments, and a harness for synthetic tasks.

pub mod analysis;
pub mod autograd;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use denoiser::{
    DenoiseBatch, Denoiser, DenoiserConfig, DenoiserParams, LengthDistribution, OracleDenoiser,
};
pub use embedding::{ClippingController, ClippingEstimate, EmbeddingTable, Vocabulary};
pub use error::{Error, Result};
pub use schedule::{ClippedTimeSampler, NoiseSchedule};
pub use tensor::Matrix;
