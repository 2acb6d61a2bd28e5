use minitune_core::autograd::{ops, Tape, Tensor};
use minitune_core::model::{TokenBatch, TransformerDecoder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::GrpoError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// 0 means greedy decoding.
    pub temperature: f32,
    pub max_new_tokens: usize,
    /// Tokens after the first occurrence are excluded from the loss.
    pub eos_token: Option<u32>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, max_new_tokens: 16, eos_token: None }
    }
}

impl SamplingConfig {
    /// Temperature the log-probs are measured at. Greedy decoding records
    /// plain log-softmax.
    pub fn scoring_temperature(&self) -> f32 {
        if self.temperature > 0.0 {
            self.temperature
        } else {
            1.0
        }
    }
}

/// G sampled responses to one prompt, stamped with the weights that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    /// Aligned with `responses`.
    pub behavior_logprobs: Vec<Vec<f32>>,
    pub policy_version: u64,
    pub creation_time: u64,
}

impl Rollout {
    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn response_len(&self) -> usize {
        self.responses.first().map_or(0, Vec::len)
    }

    pub fn stamped(mut self, id: u64, creation_time: u64) -> Self {
        self.id = id;
        self.creation_time = creation_time;
        self
    }
}

fn check_lengths(policy: &TransformerDecoder, prompt: &[u32], new_tokens: usize) -> Result<(), GrpoError> {
    if prompt.is_empty() {
        return Err(GrpoError::EmptyPrompt);
    }
    if prompt.len() + new_tokens > policy.max_seq_len() {
        return Err(GrpoError::Config(format!(
            "prompt of {} plus {new_tokens} new tokens exceeds max_seq_len {}",
            prompt.len(),
            policy.max_seq_len()
        )));
    }
    Ok(())
}

fn sample_index(logprobs: &[f32], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0f64;
    let mut last_live = 0;
    for (i, &lp) in logprobs.iter().enumerate() {
        let p = f64::from(lp).exp();
        if p > 0.0 {
            last_live = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_live
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &x)| if x > xs[best] { i } else { best })
}

/// Samples `group_size` responses of `cfg.max_new_tokens` tokens each. The
/// rollout's id and creation time are left at 0; see [`Rollout::stamped`].
pub fn generate_rollout(
    policy: &TransformerDecoder,
    policy_version: u64,
    prompt: &[u32],
    group_size: usize,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Rollout, GrpoError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall(group_size));
    }
    check_lengths(policy, prompt, cfg.max_new_tokens)?;
    let vocab = policy.vocab_size();
    let inv_t = 1.0 / cfg.scoring_temperature();
    let mut seqs: Vec<Vec<usize>> = vec![prompt.iter().map(|&t| t as usize).collect(); group_size];
    let mut logprobs = vec![Vec::with_capacity(cfg.max_new_tokens); group_size];
    let tape = Tape::no_grad();
    for _ in 0..cfg.max_new_tokens {
        let len = seqs[0].len();
        let batch = TokenBatch::new(group_size, len, seqs.concat())?;
        let logits = policy.forward(&tape, &batch, false)?;
        let last = ops::slice(&logits, 1, len - 1, len)?;
        let lp = ops::log_softmax(&ops::mul_scalar(&last, inv_t)?)?;
        for (g, seq) in seqs.iter_mut().enumerate() {
            let row = &lp.data()[g * vocab..(g + 1) * vocab];
            let tok = if cfg.temperature > 0.0 {
                sample_index(row, rng)
            } else {
                argmax(&last.data()[g * vocab..(g + 1) * vocab])
            };
            seq.push(tok);
            logprobs[g].push(row[tok]);
        }
    }
    let responses = seqs.iter().map(|s| s[prompt.len()..].iter().map(|&t| t as u32).collect()).collect();
    Ok(Rollout {
        id: 0,
        prompt: prompt.to_vec(),
        responses,
        behavior_logprobs: logprobs,
        policy_version,
        creation_time: 0,
    })
}

/// Log-probs `[G, T]` of each response token under `policy` at `temperature`,
/// differentiable through `tape`.
pub fn score_logprobs(
    policy: &TransformerDecoder,
    tape: &Tape,
    prompt: &[u32],
    responses: &[Vec<u32>],
    temperature: f32,
) -> Result<Tensor, GrpoError> {
    let g = responses.len();
    let t = responses.first().map_or(0, Vec::len);
    if g == 0 || t == 0 || responses.iter().any(|r| r.len() != t) {
        return Err(GrpoError::Config("responses must be non-empty and of equal length".into()));
    }
    check_lengths(policy, prompt, t)?;
    let p = prompt.len();
    let tokens: Vec<usize> = responses.iter().flat_map(|r| prompt.iter().chain(r).map(|&x| x as usize)).collect();
    let logits = policy.forward(tape, &TokenBatch::new(g, p + t, tokens)?, false)?;
    let shifted = ops::slice(&logits, 1, p - 1, p + t - 1)?;
    let lp = ops::log_softmax(&ops::mul_scalar(&shifted, 1.0 / temperature)?)?;
    let targets: Vec<usize> = responses.iter().flatten().map(|&x| x as usize).collect();
    Ok(ops::gather_last(&lp, &targets)?)
}
