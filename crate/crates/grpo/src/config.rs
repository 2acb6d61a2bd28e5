use std::sync::Arc;

use minitune_core::model::DecoderConfig;
use minitune_core::objectives::GrpoLossConfig;
use minitune_core::optimizers::AdamWHyper;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::postprocess::{ExactMatchReward, RewardFn};
use crate::rollout::SamplingConfig;
use crate::GrpoError;

/// How generation and training are interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Generate a batch, train on it, publish, repeat.
    Sync,
    /// Batch n+1 is generated only after update n is published, but the
    /// trainer starts on batch n while the rest of it is still generating.
    OnPolicy,
    /// Generators never wait for the trainer; consumed rollouts may be up to
    /// `max_lag` updates old.
    OffPolicy { max_lag: u64 },
}

impl Regime {
    /// Largest lag the trainer accepts.
    pub fn lag_bound(&self) -> u64 {
        match *self {
            Regime::OffPolicy { max_lag } => max_lag,
            Regime::Sync | Regime::OnPolicy => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Sync => "sync",
            Regime::OnPolicy => "async_on_policy",
            Regime::OffPolicy { .. } => "async_off_policy",
        }
    }
}

/// Virtual-time cost of each unit of work, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub generate_per_token: u64,
    pub postprocess: u64,
    pub train_per_trajectory: u64,
    pub optimizer_step: u64,
    pub publish: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { generate_per_token: 10, postprocess: 3, train_per_trajectory: 4, optimizer_step: 2, publish: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub regime: Regime,
    /// Trainer steps between publishes (off-policy only).
    pub sync_cadence: u64,
    pub num_generators: usize,
    pub num_postprocessors: usize,
    pub queue_capacity: usize,
    pub buffer_capacity: usize,
    pub total_steps: u64,
    /// Rollouts (prompts) per trainer step.
    pub rollouts_per_step: usize,
    pub group_size: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub loss: GrpoLossConfig,
    pub optimizer: AdamWHyper,
    pub costs: CostModel,
    /// Score every rollout under the frozen initial policy.
    pub reference_logprobs: bool,
    /// Threaded mode only: give up when nothing happens for this long.
    pub stall_timeout_ms: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            regime: Regime::Sync,
            sync_cadence: 1,
            num_generators: 2,
            num_postprocessors: 1,
            queue_capacity: 4,
            buffer_capacity: 64,
            total_steps: 10,
            rollouts_per_step: 4,
            group_size: 4,
            sampling: SamplingConfig::default(),
            seed: 0,
            loss: GrpoLossConfig::default(),
            optimizer: AdamWHyper::default(),
            costs: CostModel::default(),
            reference_logprobs: true,
            stall_timeout_ms: 10_000,
        }
    }
}

impl OrchestratorConfig {
    /// Settings for the one-token bandit in [`bandit_task`].
    pub fn bandit(regime: Regime) -> Self {
        OrchestratorConfig {
            regime,
            total_steps: 200,
            rollouts_per_step: 4,
            group_size: 8,
            sampling: SamplingConfig { temperature: 1.0, max_new_tokens: 1, eos_token: None },
            optimizer: AdamWHyper { lr: 1e-2, weight_decay: 0.0, ..AdamWHyper::default() },
            ..OrchestratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |msg: String| Err(GrpoError::Config(msg));
        let positive = [
            ("num_generators", self.num_generators),
            ("num_postprocessors", self.num_postprocessors),
            ("queue_capacity", self.queue_capacity),
            ("buffer_capacity", self.buffer_capacity),
            ("rollouts_per_step", self.rollouts_per_step),
            ("sampling.max_new_tokens", self.sampling.max_new_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if self.sync_cadence == 0 {
            return bad("sync_cadence must be at least 1".into());
        }
        match self.regime {
            Regime::OffPolicy { max_lag: 0 } => return bad("off-policy max_lag must be at least 1".into()),
            Regime::Sync | Regime::OnPolicy if self.sync_cadence != 1 => {
                return bad(format!(
                    "sync_cadence {} needs the off_policy regime; {} publishes after every step",
                    self.sync_cadence,
                    self.regime.name()
                ))
            }
            _ => {}
        }
        if !(self.sampling.temperature >= 0.0 && self.sampling.temperature.is_finite()) {
            return bad(format!("temperature must be finite and >= 0, got {}", self.sampling.temperature));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn generation_cost(&self) -> u64 {
        self.costs.generate_per_token * self.sampling.max_new_tokens as u64
    }

    /// Off-policy publishes after steps that land on the cadence.
    pub fn publishes_after(&self, steps_done: u64) -> bool {
        steps_done.is_multiple_of(self.sync_cadence)
    }
}

/// Model shape, prompts and reward of a run.
#[derive(Clone)]
pub struct GrpoTask {
    pub model: DecoderConfig,
    pub prompts: Vec<Vec<u32>>,
    pub reward: Arc<dyn RewardFn>,
}

impl GrpoTask {
    /// Rollout `id` answers prompt `id mod len`.
    pub fn prompt_for(&self, id: u64) -> &[u32] {
        &self.prompts[(id % self.prompts.len() as u64) as usize]
    }
}

/// One-token bandit: reward 1 when the first response token is 11.
pub fn bandit_task(seed: u64) -> GrpoTask {
    GrpoTask {
        model: DecoderConfig::new(16, 1, 2, 1, 16, 8).with_seed(seed),
        prompts: vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8]],
        reward: Arc::new(ExactMatchReward { target: vec![11] }),
    }
}

/// Per-rollout RNG, so a rollout's samples depend only on the seed and its
/// id, not on which worker made it or when.
pub fn rollout_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
