use std::sync::Arc;

use minitune_core::autograd::Tape;
use minitune_core::model::TransformerDecoder;
use serde::{Deserialize, Serialize};

use crate::rollout::{score_logprobs, Rollout};
use crate::GrpoError;

/// Added to the group standard deviation before normalizing.
pub const ADVANTAGE_EPS: f32 = 1e-6;

/// Scalar score of one response. Must be pure.
pub trait RewardFn: Send + Sync {
    fn score(&self, prompt: &[u32], response: &[u32]) -> f32;
}

impl<F> RewardFn for F
where
    F: Fn(&[u32], &[u32]) -> f32 + Send + Sync,
{
    fn score(&self, prompt: &[u32], response: &[u32]) -> f32 {
        self(prompt, response)
    }
}

/// 1 when the response starts with `target`, else 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactMatchReward {
    pub target: Vec<u32>,
}

impl RewardFn for ExactMatchReward {
    fn score(&self, _prompt: &[u32], response: &[u32]) -> f32 {
        if response.starts_with(&self.target) {
            1.0
        } else {
            0.0
        }
    }
}

/// `(r - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f32]) -> Vec<f32> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (f64::from(r) - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + f64::from(ADVANTAGE_EPS);
    rewards.iter().map(|&r| ((f64::from(r) - mean) / denom) as f32).collect()
}

/// Response positions up to and including the first `eos`.
pub fn response_mask(response: &[u32], eos: Option<u32>) -> Vec<bool> {
    let end = eos.and_then(|e| response.iter().position(|&t| t == e)).map_or(response.len(), |i| i + 1);
    (0..response.len()).map(|i| i < end).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryMetadata {
    pub reward_mean: f32,
    pub reward_std: f32,
    /// Log-probs under the frozen initial policy. Not used by the loss.
    pub ref_logprobs: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedTrajectory {
    pub rollout: Rollout,
    pub rewards: Vec<f32>,
    pub advantages: Vec<f32>,
    /// Per response token; true where the loss applies.
    pub masks: Vec<Vec<bool>>,
    pub metadata: TrajectoryMetadata,
}

impl ProcessedTrajectory {
    pub fn id(&self) -> u64 {
        self.rollout.id
    }

    pub fn policy_version(&self) -> u64 {
        self.rollout.policy_version
    }

    pub fn flat_behavior(&self) -> Vec<f32> {
        self.rollout.behavior_logprobs.concat()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.masks.concat()
    }
}

/// Rewards, group-normalized advantages and loss masks for one rollout.
pub fn postprocess(rollout: Rollout, reward: &dyn RewardFn, eos: Option<u32>) -> ProcessedTrajectory {
    let rewards: Vec<f32> = rollout.responses.iter().map(|r| reward.score(&rollout.prompt, r)).collect();
    let advantages = group_advantages(&rewards);
    let masks = rollout.responses.iter().map(|r| response_mask(r, eos)).collect();
    let n = rewards.len().max(1) as f32;
    let reward_mean = rewards.iter().sum::<f32>() / n;
    let reward_std = (rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f32>() / n).sqrt();
    ProcessedTrajectory {
        rollout,
        rewards,
        advantages,
        masks,
        metadata: TrajectoryMetadata { reward_mean, reward_std, ref_logprobs: None },
    }
}

/// Post-processing worker state: the reward and an optional frozen
/// reference policy.
pub struct Postprocessor {
    reward: Arc<dyn RewardFn>,
    eos: Option<u32>,
    reference: Option<TransformerDecoder>,
    temperature: f32,
}

impl Postprocessor {
    pub fn new(reward: Arc<dyn RewardFn>, eos: Option<u32>) -> Self {
        Postprocessor { reward, eos, reference: None, temperature: 1.0 }
    }

    pub fn with_reference(mut self, reference: TransformerDecoder, temperature: f32) -> Self {
        self.reference = Some(reference);
        self.temperature = temperature;
        self
    }

    pub fn process(&self, rollout: Rollout) -> Result<ProcessedTrajectory, GrpoError> {
        let mut traj = postprocess(rollout, self.reward.as_ref(), self.eos);
        if let Some(reference) = &self.reference {
            let r = &traj.rollout;
            let lp = score_logprobs(reference, &Tape::no_grad(), &r.prompt, &r.responses, self.temperature)?;
            let t = r.response_len();
            traj.metadata.ref_logprobs = Some(lp.data().chunks(t).map(<[f32]>::to_vec).collect());
        }
        Ok(traj)
    }
}
