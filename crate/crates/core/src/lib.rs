//! Learned compressible classifier features.
//!
//! A classifier is trained with an entropy bottleneck at its penultimate
//! activation: the features are quantized to integers, a learned factorized
//! density estimates their code length, and the training objective trades
//! task loss against that code length. After training the density is frozen
//! into integer probability tables and a range coder turns quantized feature
//! vectors into self-describing blobs. Classical compressors (DEFLATE,
//! float16, uniform quantization, PCA) provide the comparison baselines.

pub mod checkpoint;
pub mod density;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
