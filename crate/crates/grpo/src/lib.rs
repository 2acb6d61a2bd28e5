//! Grouped-rollout policy optimization with decoupled generation, scoring and
//! training. Workers talk only through a bounded queue, a replay buffer and a
//! versioned parameter server. Two clocks drive them: a deterministic
//! virtual-time scheduler and plain OS threads.

mod buffer;
mod config;
mod postprocess;
mod queue;
mod rollout;
mod server;
mod sim;
mod threaded;
mod trace;
mod trainer;

use minitune_core::autograd::TensorError;
use minitune_core::model::ModelError;
use minitune_core::objectives::LossError;
use minitune_core::optimizers::OptimError;
use thiserror::Error;

pub use buffer::ReplayBuffer;
pub use config::{bandit_task, rollout_rng, CostModel, GrpoTask, OrchestratorConfig, Regime};
pub use postprocess::{
    group_advantages, postprocess, response_mask, ExactMatchReward, Postprocessor, ProcessedTrajectory, RewardFn,
    TrajectoryMetadata, ADVANTAGE_EPS,
};
pub use queue::{BoundedQueue, PushError};
pub use rollout::{generate_rollout, score_logprobs, Rollout, SamplingConfig};
pub use server::{ParameterServer, PublishTxn, WeightSnapshot};
pub use sim::{run_virtual, IdLedger, RunOutput};
pub use threaded::run_threaded;
pub use trace::{to_jsonl, write_jsonl, Event, RunReport, StepRow, TraceEvent};
pub use trainer::{GrpoTrainer, StepMetrics};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid orchestrator config: {0}")]
    Config(String),
    #[error("trajectory {id} has lag {lag}, above the bound {max_lag}")]
    LagViolation { id: u64, lag: u64, max_lag: u64 },
    #[error("trajectory {id} was generated by version {policy_version}, newer than trainer version {trainer_version}")]
    FutureVersion { id: u64, policy_version: u64, trainer_version: u64 },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("snapshot does not match the published layout: {0}")]
    Snapshot(String),
    #[error("deadlock at t={time}: no worker can make progress\n{dump}")]
    Deadlock { time: u64, dump: String },
    #[error("worker {0} panicked")]
    WorkerPanic(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
