//! Contrastive embeddings of time series conditioned on auxiliary labels.
//!
//! The crate is `no_std` (it needs `alloc`) and holds the numerical core:
//! a small reverse-mode tensor engine, the encoders, sampling schemes, the
//! InfoNCE objective, training, evaluation metrics, persistent homology and
//! the synthetic spiking benchmark. File formats and the command line live in
//! the `cebra` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod objective;
pub mod rng;
pub mod sampling;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
pub use data::{MultiSessionDataset, Session, SplitPlan};
pub use encoder::{build_encoder, ArchSpec, Architecture, EncoderModel};
pub use matrix::Matrix;
pub use sampling::{BatchTriplet, Sampler, SamplerConfig, SamplingMode, WindowRef};
pub use objective::{InfoNce, LossReport, SimilarityKind};
pub use trainer::{adapt, fit, AdaptMode, Fitted, TrainConfig, TrainRecord};
pub use tensor::{GradTape, LayerKind, LayerSpec, Tensor};
