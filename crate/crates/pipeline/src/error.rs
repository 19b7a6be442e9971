use flowplan_core::{CheckpointError, FlowError, TensorError, TrainError};
use flowplan_world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("projection head is frozen; it cannot be loaded for training")]
    HeadFrozen,
    #[error("projection head must be frozen before planner training")]
    HeadNotFrozen,
    #[error("head checksum mismatch: planner trained against {planner}, synthesizer against {synthesizer}")]
    ChecksumMismatch { planner: String, synthesizer: String },
    #[error("semantic dimension mismatch: planner d={planner}, synthesizer d={synthesizer}")]
    DimMismatch { planner: usize, synthesizer: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
