//! Training, sampling, cascades, evaluation and schedule search over files.

mod checkpoint;
mod config;
mod sample;
mod search;
mod train;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::denoiser::DenoiserError;
use crate::diffusion::DiffusionError;
use crate::metrics::MetricsError;
use crate::numerics::NumericsError;
use crate::schedule::ScheduleError;

pub use checkpoint::{Checkpoint, Resolution, FORMAT_VERSION, MAGIC};
pub use config::{DataSpec, TrainConfig, TrainMode};
pub use sample::{
    bicubic_baseline, cascade, sample_batch, BatchSamples, sample_cmd, validate_cascade, CascadeOutcome, CascadeSpec, CascadeStage,
    SampleInputs, SampleOutcome, SampleSettings, MAX_INFERENCE_STEPS,
};
pub use search::{
    evaluate_dirs, AnalyticHarness, held_out_pairs, image_features, item_vectors, pairs_from_images, search_cmd, search_with,
    write_search_table,
};
pub use train::{learning_rate_at, smoothed, train, Adam, TrainOptions, TrainOutcome, LOSS_LOG_HEADER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("missing counterpart for {0}")]
    MissingCounterpart(PathBuf),
    #[error("{0}")]
    Resolution(String),
    #[error("cascade stage {from} -> stage {to}: {msg}")]
    Chain { from: usize, to: usize, msg: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        PipelineError::Io { path: path.into(), msg: e.to_string() }
    }

    /// Process exit status: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) | PipelineError::Schedule(_) => 2,
            PipelineError::Data(_)
            | PipelineError::Io { .. }
            | PipelineError::Checkpoint(_)
            | PipelineError::Version { .. }
            | PipelineError::MissingCounterpart(_)
            | PipelineError::Resolution(_)
            | PipelineError::Chain { .. } => 3,
            PipelineError::Metrics(m) => match m {
                MetricsError::NegativeEigenvalue(_) | MetricsError::Asymmetric(_) => 4,
                _ => 3,
            },
            PipelineError::Denoiser(d) => match d {
                DenoiserError::InvalidConfig(_) => 2,
                DenoiserError::Shape(_) | DenoiserError::Data(_) => 3,
                _ => 4,
            },
            PipelineError::NonFiniteLoss { .. } | PipelineError::Diffusion(_) | PipelineError::Numerics(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Deterministic generator for `(seed, stream)`; streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
