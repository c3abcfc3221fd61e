//! Conditional range-image diffusion: noise schedule, data normalization,
//! the denoiser and its training and sampling loops.

pub mod checkpoint;
pub mod normalize;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use normalize::{decode_range, encode_range};
pub use schedule::DiffusionSchedule;
pub use unet::{CondBatch, ConditioningConfig, Denoiser, DenoiserConfig, RigCamera, RigPlans};
pub use train::{rig_of, train_step, StepLog, TrainConfig, TrainSet, TrainState};
pub use checkpoint::{Checkpoint, ModelSpec};
pub use sample::sample;
