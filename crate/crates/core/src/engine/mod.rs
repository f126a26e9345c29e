//! Training, checkpoints and sliding-window inference.

pub mod checkpoint;
pub mod infer;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use infer::{argmax_labels, evaluate, predict_labels, sliding_window, window_starts};
pub use train::{EpochRecord, TrainConfig, Trainer};
