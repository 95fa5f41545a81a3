//! One-shot voice conversion with a vector-quantized U-Net autoencoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`audio`] / [`synth`]: WAV I/O, resampling, silence trimming, fixed-length
//!   segmentation, and a deterministic synthetic multi-speaker corpus.
//! - [`features`]: STFT, 80-bin log-mel extraction, and the `MELS` on-disk format.
//! - [`griffin_lim`]: magnitude-only waveform reconstruction for rendering.
//! - [`autodiff`]: a small reverse-mode tensor engine with exactly the
//!   primitives the model needs, plus a finite-difference gradient checker.
//! - [`layers`]: codebook quantization, speaker-embedding extraction, and the
//!   down-conv / GBlock / upsampling building blocks.
//! - [`model`]: the 3-level encoder/decoder, losses, and conversion.
//! - [`training`]: deterministic ADAM loop with binary checkpoints.
//! - [`probe`]: speaker-probe classifiers, L1 evaluation, and the codebook
//!   ablation harness.

pub mod audio;
pub mod autodiff;
pub mod error;
pub mod features;
pub mod griffin_lim;
pub mod layers;
pub mod model;
pub mod probe;
pub mod seeds;
pub mod synth;
pub mod training;


pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};



