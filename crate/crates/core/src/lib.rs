//! Multi-level texture encoding network.
//!
//! A residual convolutional backbone exposes four stages; each selected stage
//! feeds a learnable encoding module that fuses an orderless residual
//! encoding with globally pooled features through a bilinear product and
//! projects the result to a fixed length. The per-level vectors are
//! concatenated and classified.
//!
//! Everything runs on a small reverse-mode tape over dense `f64` tensors so
//! every gradient can be checked against finite differences.

pub mod backbone;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use backbone::{BackboneConfig, BackboneParams, BasicBlockParams};
pub use encoding::{Codebook, LemConfig, LemParams};
pub use error::{Error, Result};
pub use network::{LevelSet, Model, MulterConfig, MulterParams};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
pub use training::{EpochMetrics, OptimizerState, TrainingConfig};
