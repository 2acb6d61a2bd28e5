//! Token cross-entropy, the fused linear cross-entropy, and the clipped
//! group-relative policy objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::meter::{category_scope, Watermark};
use crate::autograd::ops::{custom_op, logsumexp, mm, mm_nt, mm_tn};
use crate::autograd::{Buffer, Category, Tensor, TensorError};

pub const IGNORE_INDEX: i64 = -100;
pub const DEFAULT_CHUNK_SIZE: usize = 256;
pub const DEFAULT_CLIP_EPSILON: f32 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target {target} at row {row} is outside [0, {vocab}) and is not the ignore index")]
    TargetOutOfRange { row: usize, target: i64, vocab: usize },
    #[error("chunk_size must be at least 1")]
    ZeroChunkSize,
    #[error("{0}")]
    Shape(String),
    #[error("token mask selects no tokens")]
    EmptyMask,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct LossResult {
    /// Scalar mean over non-ignored tokens.
    pub loss: Tensor,
    pub num_valid_tokens: usize,
    /// Most bytes the loss computation held on top of what was live when it
    /// started.
    pub loss_phase_peak_bytes: usize,
    /// Largest amount of logits held at once.
    pub peak_logits_bytes: usize,
    /// Rows passed through the output projection.
    pub projected_rows: usize,
}

fn check_targets(targets: &[i64], vocab: usize, ignore_index: i64) -> Result<Vec<usize>, LossError> {
    let mut valid = Vec::new();
    for (row, &t) in targets.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        if t < 0 || t as usize >= vocab {
            return Err(LossError::TargetOutOfRange { row, target: t, vocab });
        }
        valid.push(row);
    }
    Ok(valid)
}

/// Per-row `lse(x) - x[target]`, accumulated in row order.
fn rows_loss(logits: &[f32], vocab: usize, targets: impl Iterator<Item = usize>) -> f32 {
    let mut acc = 0.0f32;
    for (row, t) in logits.chunks(vocab).zip(targets) {
        acc += logsumexp(row) - row[t];
    }
    acc
}

/// Turns logits rows into `(softmax - onehot) * scale` in place.
fn rows_grad(logits: &mut [f32], vocab: usize, targets: impl Iterator<Item = usize>, scale: f32) {
    for (row, t) in logits.chunks_mut(vocab).zip(targets) {
        let lse = logsumexp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * scale;
        }
        row[t] -= scale;
    }
}

/// Mean token cross-entropy of `logits: [N, V]`.
pub fn cross_entropy(logits: &Tensor, targets: &[i64], ignore_index: i64) -> Result<LossResult, LossError> {
    let mark = Watermark::start();
    let logits_mark = Watermark::for_category(Category::Logits);
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(LossError::Shape(format!("logits {:?} vs {} targets", logits.shape(), targets.len())));
    }
    let vocab = logits.shape()[1];
    let valid = check_targets(targets, vocab, ignore_index)?;
    let n_valid = valid.len();
    let t: Vec<usize> = targets.iter().map(|&t| if t == ignore_index { 0 } else { t as usize }).collect();

    let mut acc = 0.0f32;
    for &r in &valid {
        acc += rows_loss(&logits.data()[r * vocab..(r + 1) * vocab], vocab, std::iter::once(t[r]));
    }
    let loss_value = if n_valid == 0 { 0.0 } else { acc / n_valid as f32 };

    let x = logits.buffer().clone();
    let rows = targets.len();
    let loss = custom_op(
        "cross_entropy",
        &[],
        vec![loss_value],
        &[logits],
        Box::new(move |g, _| {
            let mut grad = vec![0.0f32; rows * vocab];
            if n_valid > 0 {
                let scale = g[0] / n_valid as f32;
                for &r in &valid {
                    let row = &mut grad[r * vocab..(r + 1) * vocab];
                    row.copy_from_slice(&x.data()[r * vocab..(r + 1) * vocab]);
                    rows_grad(row, vocab, std::iter::once(t[r]), scale);
                }
            }
            vec![Some(grad)]
        }),
    )?;
    Ok(LossResult {
        loss,
        num_valid_tokens: n_valid,
        loss_phase_peak_bytes: mark.growth(),
        peak_logits_bytes: logits_mark.growth().max(logits.size_bytes()),
        projected_rows: 0,
    })
}

/// Reference path for the fused loss: full `[N, V]` logits, then cross-entropy.
pub fn projected_cross_entropy(
    hidden: &Tensor,
    weight: &Tensor,
    targets: &[i64],
    ignore_index: i64,
) -> Result<LossResult, LossError> {
    let mark = Watermark::start();
    let logits_mark = Watermark::for_category(Category::Logits);
    let logits = {
        let _tag = category_scope(Category::Logits);
        crate::autograd::ops::matmul_t(hidden, weight)?
    };
    let mut result = cross_entropy(&logits, targets, ignore_index)?;
    result.projected_rows = hidden.shape()[0];
    drop(logits);
    result.loss_phase_peak_bytes = mark.growth();
    result.peak_logits_bytes = logits_mark.growth();
    Ok(result)
}

/// Cross-entropy of `hidden @ weight^T` without materializing the logits.
///
/// Ignored rows are dropped before projection; the remaining rows are
/// projected `chunk_size` at a time in the forward pass and again in the
/// backward pass. The loss is accumulated in row order, so it equals
/// [`projected_cross_entropy`] bit for bit.
pub fn linear_cross_entropy(
    hidden: &Tensor,
    weight: &Tensor,
    targets: &[i64],
    ignore_index: i64,
    chunk_size: usize,
) -> Result<LossResult, LossError> {
    let mark = Watermark::start();
    let logits_mark = Watermark::for_category(Category::Logits);
    if chunk_size == 0 {
        return Err(LossError::ZeroChunkSize);
    }
    if hidden.rank() != 2
        || weight.rank() != 2
        || hidden.shape()[1] != weight.shape()[1]
        || hidden.shape()[0] != targets.len()
    {
        return Err(LossError::Shape(format!(
            "hidden {:?}, weight {:?}, {} targets",
            hidden.shape(),
            weight.shape(),
            targets.len()
        )));
    }
    let (n, e) = (hidden.shape()[0], hidden.shape()[1]);
    let vocab = weight.shape()[0];
    let valid = Rc::new(check_targets(targets, vocab, ignore_index)?);
    let t: Rc<Vec<usize>> = Rc::new(valid.iter().map(|&r| targets[r] as usize).collect());
    let n_valid = valid.len();

    let h = hidden.buffer().clone();
    let w = weight.buffer().clone();
    let mut acc = 0.0f32;
    for (rows, tgt) in valid.chunks(chunk_size).zip(t.chunks(chunk_size)) {
        let chunk = project_rows(&h, &w, rows, e, vocab);
        acc += rows_loss(chunk.data(), vocab, tgt.iter().copied());
    }
    let loss_value = if n_valid == 0 { 0.0 } else { acc / n_valid as f32 };

    let loss = custom_op(
        "linear_cross_entropy",
        &[],
        vec![loss_value],
        &[hidden, weight],
        Box::new(move |g, needs| {
            let mut gh = needs[0].then(|| vec![0.0f32; n * e]);
            let mut gw = needs[1].then(|| vec![0.0f32; vocab * e]);
            if n_valid == 0 {
                return vec![gh, gw];
            }
            let scale = g[0] / n_valid as f32;
            for (rows, tgt) in valid.chunks(chunk_size).zip(t.chunks(chunk_size)) {
                let mut chunk = project_rows(&h, &w, rows, e, vocab);
                let dlogits = chunk.data_mut();
                rows_grad(dlogits, vocab, tgt.iter().copied(), scale);
                if let Some(gh) = gh.as_mut() {
                    for (k, &r) in rows.iter().enumerate() {
                        mm(&dlogits[k * vocab..(k + 1) * vocab], w.data(), 1, vocab, e, &mut gh[r * e..(r + 1) * e]);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let hrows = gather_rows(&h, rows, e);
                    mm_tn(dlogits, &hrows, vocab, rows.len(), e, gw);
                }
            }
            vec![gh, gw]
        }),
    )?;
    Ok(LossResult {
        loss,
        num_valid_tokens: n_valid,
        loss_phase_peak_bytes: mark.growth(),
        peak_logits_bytes: logits_mark.growth(),
        projected_rows: n_valid,
    })
}

fn gather_rows(h: &Buffer, rows: &[usize], e: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * e);
    for &r in rows {
        out.extend_from_slice(&h.data()[r * e..(r + 1) * e]);
    }
    out
}

/// Metered `[rows, V]` logits for the selected hidden rows.
fn project_rows(h: &Buffer, w: &Buffer, rows: &[usize], e: usize, vocab: usize) -> Buffer {
    let mut chunk = Buffer::new(vec![0.0f32; rows.len() * vocab], Category::Logits);
    for (k, &r) in rows.iter().enumerate() {
        mm_nt(&h.data()[r * e..(r + 1) * e], w.data(), 1, e, vocab, &mut chunk.data_mut()[k * vocab..(k + 1) * vocab]);
    }
    chunk
}

/// Clipped surrogate settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoLossConfig {
    pub clip_epsilon: f32,
}

impl Default for GrpoLossConfig {
    fn default() -> Self {
        GrpoLossConfig { clip_epsilon: DEFAULT_CLIP_EPSILON }
    }
}

/// `-mean_masked min(r A, clip(r, 1-eps, 1+eps) A)` with `r = exp(new - behavior)`.
///
/// `new_logprobs` and `behavior_logprobs` are `[G, T]`, `advantages` is `[G]`
/// and `token_mask` is `[G, T]`. Only `new_logprobs` receives a gradient.
pub fn grpo_objective(
    new_logprobs: &Tensor,
    behavior_logprobs: &[f32],
    advantages: &[f32],
    token_mask: &[bool],
    cfg: &GrpoLossConfig,
) -> Result<Tensor, LossError> {
    if new_logprobs.rank() != 2 {
        return Err(LossError::Shape(format!("new_logprobs must be [G, T], got {:?}", new_logprobs.shape())));
    }
    let (g, t) = (new_logprobs.shape()[0], new_logprobs.shape()[1]);
    if behavior_logprobs.len() != g * t || token_mask.len() != g * t || advantages.len() != g {
        return Err(LossError::Shape(format!(
            "[{g}, {t}] log-probs with {} behavior log-probs, {} mask entries, {} advantages",
            behavior_logprobs.len(),
            token_mask.len(),
            advantages.len()
        )));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(LossError::NonFinite("advantage"));
    }
    let count = token_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let eps = cfg.clip_epsilon;
    let (lo, hi) = (1.0 - eps, 1.0 + eps);
    let new = new_logprobs.data();
    let mut acc = 0.0f32;
    // d(term)/d(new) per token
    let mut dterm = vec![0.0f32; g * t];
    for i in 0..g * t {
        if !token_mask[i] {
            continue;
        }
        let a = advantages[i / t];
        let r = (new[i] - behavior_logprobs[i]).exp();
        let unclipped = r * a;
        let clipped = r.clamp(lo, hi) * a;
        if unclipped <= clipped {
            acc += unclipped;
            dterm[i] = r * a;
        } else {
            acc += clipped;
            dterm[i] = if r > lo && r < hi { r * a } else { 0.0 };
        }
    }
    let n = count as f32;
    let loss = custom_op(
        "grpo_objective",
        &[],
        vec![-acc / n],
        &[new_logprobs],
        Box::new(move |gout, _| vec![Some(dterm.iter().map(|d| -d * gout[0] / n).collect())]),
    )?;
    Ok(loss)
}
