//! Hybrid CNN/transformer volumetric segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape and the kernels the
//!   network is built from.
//! * [`blocks`] and [`swin`]: the convolutional blocks (dilated aggregator,
//!   down/up stages, channel/spatial attention gate) and the 3D shifted-window
//!   transformer stages.
//! * [`model`]: configuration, assembly, parameter store and FLOP estimate.
//! * [`loss`] and [`metrics`]: Dice + cross-entropy with deep supervision,
//!   Dice similarity and HD95.
//! * [`optim`] and [`engine`]: AdamW, cosine schedule, training loop,
//!   checkpoints and sliding-window inference.
//! * [`data`]: volume files, synthetic phantoms and patch sampling.

pub mod blocks;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod swin;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Element, Tensor, Var};
