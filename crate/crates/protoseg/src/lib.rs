//! Few-shot semantic segmentation on a deterministic synthetic-shapes
//! benchmark: episodic prototype matching (masked average pooling + cosine
//! softmax) trained with a segmentation/alignment loss plus class-specific
//! and class-agnostic contrastive losses backed by a momentum encoder and a
//! FIFO prototype dictionary.

pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod matcher;
pub mod prototype;
pub mod tensor;
pub mod trainer;

pub use config::ExperimentConfig;
pub use data::{Dataset, Episode, FoldSplit, LabeledImage};
pub use encoder::{EncoderConfig, EncoderParams, FeatureStack};
pub use tensor::{Mask, Tensor};

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
