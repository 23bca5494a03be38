//! Conditional variational recurrent autoencoder for melody grids, with its
//! own reverse-mode differentiation, training loop, checkpoints and
//! grammar-driven generation.

use thiserror::Error;
use tunegram_core::encoding::EncodingError;

pub mod checkpoint;
pub mod fixtures;
pub mod generate;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{
    kl_divergence, loss, sample, warmup_beta, CvaeConfig, CvaeModel, DecodedGrid, Example, LatentDistribution,
    LossParts,
};
pub use generate::{generate, reharmonize, reharmonize_segment, Reharmonization, ReharmonizedSegment};
pub use tensor::Mat;
pub use train::{train, LossHistory, LossRecord, Trainer};

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        step: u64,
        what: String,
        /// Model as it was before the failing step.
        snapshot: Box<CvaeModel>,
    },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("section {section}: {source}")]
    Section { section: usize, source: EncodingError },
    #[error("no usable segment: {0}")]
    NoSegments(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
