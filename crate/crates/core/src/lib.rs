//! Temporally aligned contrastive masked autoencoder for audio-visual pairs.
//!
//! The crate trains a pair of transformer encoders on (frame, spectrogram
//! window) pairs with a joint layer, dedicated global tokens for the
//! contrastive objective, register tokens, and a shallow joint decoder for
//! masked reconstruction. Downstream evaluation covers cross-modal
//! retrieval, linear probing, sound-prompted localization maps, and
//! intra-video temporal segmentation. Everything runs on a small built-in
//! reverse-mode tensor engine in double precision and is verified against
//! finite differences and synthetic-data oracles.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod runner;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use alignment::AlignedPair;
pub use config::{EvalConfig, EvalTask, ProbeConfig, RunConfig};
pub use downstream::{AggregationStrategy, EmbeddingSequenceSet, RankingMatrix, RetrievalDirection};
pub use error::{Error, Result};
pub use graph::{NodeId, Tape};
pub use model::{Architecture, DataShape, EncodedPair, ModalitySelect, ModelState};
pub use objectives::{Direction, LossReport, ReconNorm, TrainConfig};
pub use synthetic::{Dataset, SyntheticConfig};
pub use tensor::Tensor;
pub use tokenizer::{Modality, TokenBatch};
