//! Numeric core for the flowplan pipeline.
//!
//! Row-major `f64` tensors, a Wengert-tape reverse-mode differentiator,
//! named parameter storage with AdamW, and the flow-matching primitives
//! (straight interpolation path, regression loss, logit-normal timesteps,
//! Euler integration, classifier-free guidance) together with the MLP
//! velocity network shared by every generative model in the workspace.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod velocity;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
pub use error::TensorError;
pub use flow::{
    cfg_velocity, euler_integrate, fm_loss, interpolate, sample_timestep, ConditionalField, FlowError, SamplerConfig,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{train_velocity, Batch, TrainConfig, TrainError, TrainStats};
pub use velocity::{VelocityConfig, VelocityModel};
