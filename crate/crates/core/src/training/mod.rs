//! Optimization loop, Adam, gradient clipping and resumable checkpoints.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trainer::{EpochAccum, EpochReport, Event, StepReport, StopReason, TrainConfig, TrainState, Trainer};
