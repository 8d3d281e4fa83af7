//! Neural audio fingerprinting.
//!
//! A 1 s audio segment is turned into a log-power Mel spectrogram, encoded by a
//! separable-convolution network into a unit-norm embedding, and looked up in a
//! database by maximum inner-product search. Queries longer than one segment
//! are resolved by offset-compensated sequence scoring.
//!
//! The pipeline, bottom up:
//!
//! - [`audio`]: clips, WAV I/O and resampling
//! - [`frontend`]: STFT, Mel filterbank, segmentation
//! - [`augment`]: the replica degradation chain used for training and queries
//! - [`autodiff`]: the small reverse-mode tensor engine the model trains on
//! - [`encoder`]: the fingerprinter network
//! - [`contrastive`]: in-batch NT-Xent objective
//! - [`train`]: optimizers, learning-rate schedule and the training loop
//! - [`index`]: fingerprint database, exhaustive and IVF-PQ search
//! - [`search`]: sequence-level search with offset compensation
//! - [`eval`]: query synthesis and Top-1 hit-rate reporting
//! - [`synth`]: a synthetic corpus generator (music, noise, impulse responses)

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod index;
mod io_util;
pub mod search;
pub mod synth;
pub mod train;

pub use audio::AudioClip;
pub use encoder::{Encoder, EncoderConfig, Fingerprint};
pub use error::{Error, Result};
pub use frontend::{FeatureExtractor, FeatureParams, MelSpectrogram};
pub use index::{FingerprintDb, IvfPqIndex};
pub use io_util::write_atomic;
