//! Progressive multi-scale masked-prediction pretraining for speech.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape and a finite-difference gradient checker.
//! - [`features`]: waveforms, 39-dimensional MFCCs and the binary feature/audio formats.
//! - [`clustering`]: Lloyd k-means with k-means++ seeding and multi-resolution target sets.
//! - [`model`]: convolutional waveform encoder, transformer encoder with window-restricted
//!   heads, and cosine-similarity codebook heads.
//! - [`ssl`]: span masking, masked prediction losses, learning-rate schedule and Adam.
//! - [`finetune`]: CTC loss and fine-tuning, greedy / LM-fused beam decoding, WER.
//! - [`pipeline`]: the two-iteration recipe, toy corpus generator, manifests.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix it to `f64`,
//! which is what the training pipeline uses.

pub mod clustering;
pub mod error;
pub mod features;
pub mod finetune;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scalar;
pub mod ssl;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Gradients = numerics::Gradients<f64>;
pub type Waveform = features::Waveform<f64>;
pub type FeatureSequence = features::FeatureSequence<f64>;
pub type ClusterModel = clustering::ClusterModel<f64>;
pub type Params = model::Params<f64>;
pub type CodebookHead = model::CodebookHead<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type Adam = ssl::Adam<f64>;

pub type TensorF32 = numerics::Tensor<f32>;
pub type TapeF32 = numerics::Tape<f32>;
pub type ParamsF32 = model::Params<f32>;

