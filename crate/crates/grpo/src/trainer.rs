use minitune_core::autograd::{ops, Tape};
use minitune_core::model::{NamedTensor, TransformerDecoder};
use minitune_core::objectives::{grpo_objective, GrpoLossConfig};
use minitune_core::optimizers::{AdamW, AdamWHyper, Precision};
use serde::{Deserialize, Serialize};

use crate::postprocess::ProcessedTrajectory;
use crate::rollout::score_logprobs;
use crate::GrpoError;

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 0-based index of the update.
    pub step: u64,
    /// Mean per-trajectory loss.
    pub loss: f32,
    pub reward_mean: f32,
    pub reward_std: f32,
    pub ids: Vec<u64>,
    pub lags: Vec<u64>,
}

#[derive(Default)]
struct Pending {
    loss_sum: f32,
    ids: Vec<u64>,
    lags: Vec<u64>,
    rewards: Vec<f32>,
}

/// Policy plus AdamW. Each trajectory's loss is the masked token mean,
/// and a step averages trajectories.
pub struct GrpoTrainer {
    policy: TransformerDecoder,
    optimizer: AdamW,
    version: u64,
    loss: GrpoLossConfig,
    temperature: f32,
    lag_bound: u64,
    pending: Pending,
}

impl GrpoTrainer {
    pub fn new(
        policy: TransformerDecoder,
        hyper: AdamWHyper,
        loss: GrpoLossConfig,
        temperature: f32,
        lag_bound: u64,
    ) -> Result<Self, GrpoError> {
        let optimizer = AdamW::new(&policy.trainable_parameters(), hyper, Precision::F32)?;
        Ok(GrpoTrainer { policy, optimizer, version: 0, loss, temperature, lag_bound, pending: Pending::default() })
    }

    /// Updates applied so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn policy(&self) -> &TransformerDecoder {
        &self.policy
    }

    pub fn snapshot(&self) -> Vec<NamedTensor> {
        self.policy.state()
    }

    pub fn pending(&self) -> usize {
        self.pending.ids.len()
    }

    /// `trainer_version - policy_version`, rejecting anything over the bound.
    pub fn lag_of(&self, traj: &ProcessedTrajectory) -> Result<u64, GrpoError> {
        let lag = self.version.checked_sub(traj.policy_version()).ok_or(GrpoError::FutureVersion {
            id: traj.id(),
            policy_version: traj.policy_version(),
            trainer_version: self.version,
        })?;
        if lag > self.lag_bound {
            return Err(GrpoError::LagViolation { id: traj.id(), lag, max_lag: self.lag_bound });
        }
        Ok(lag)
    }

    /// Adds `loss / batch_size` of one trajectory to the gradients.
    pub fn accumulate(&mut self, traj: &ProcessedTrajectory, batch_size: usize) -> Result<f32, GrpoError> {
        let lag = self.lag_of(traj)?;
        let r = &traj.rollout;
        let tape = Tape::new();
        let new_lp = score_logprobs(&self.policy, &tape, &r.prompt, &r.responses, self.temperature)?;
        let loss = grpo_objective(&new_lp, &traj.flat_behavior(), &traj.advantages, &traj.flat_mask(), &self.loss)?;
        let value = loss.item()?;
        tape.backward(&ops::mul_scalar(&loss, 1.0 / batch_size as f32)?)?;
        self.pending.loss_sum += value;
        self.pending.ids.push(traj.id());
        self.pending.lags.push(lag);
        self.pending.rewards.extend_from_slice(&traj.rewards);
        Ok(value)
    }

    /// Steps the optimizer on the accumulated gradients.
    pub fn apply_update(&mut self) -> Result<StepMetrics, GrpoError> {
        if self.pending.ids.is_empty() {
            return Err(GrpoError::EmptyBatch);
        }
        self.optimizer.step()?;
        self.optimizer.zero_grad();
        let p = std::mem::take(&mut self.pending);
        let n = p.rewards.len().max(1) as f32;
        let reward_mean = p.rewards.iter().sum::<f32>() / n;
        let reward_std = (p.rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f32>() / n).sqrt();
        let metrics = StepMetrics {
            step: self.version,
            loss: p.loss_sum / p.ids.len() as f32,
            reward_mean,
            reward_std,
            ids: p.ids,
            lags: p.lags,
        };
        self.version += 1;
        Ok(metrics)
    }

    /// Consumes a whole batch in order and applies one update. Every lag is
    /// checked before any gradient is taken.
    pub fn train_step(&mut self, batch: &[ProcessedTrajectory]) -> Result<StepMetrics, GrpoError> {
        if batch.is_empty() {
            return Err(GrpoError::EmptyBatch);
        }
        for traj in batch {
            self.lag_of(traj)?;
        }
        for traj in batch {
            self.accumulate(traj, batch.len())?;
        }
        self.apply_update()
    }
}
