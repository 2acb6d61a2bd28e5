//! Dataset loading, byte tokenizer, instruct template, packing and collation.

mod dataset;
mod packing;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::model::{attention_mask, ModelError, TokenBatch};
use crate::objectives::IGNORE_INDEX;

pub use dataset::{load_jsonl_dataset, parse_jsonl, synthetic_corpus, write_jsonl, InstructSample, SplitSpec};
pub use packing::{pack_sequences, pad_sequences, padding_fraction, PackedSequence};

pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
pub const PAD_ID: u32 = 258;
/// Bytes plus the three special tokens.
pub const TOKENIZER_VOCAB: usize = 259;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field \"{field}\" {reason}")]
    InvalidField { line: usize, field: &'static str, reason: String },
    #[error("{0}")]
    Packing(String),
    #[error("completion needs {needed} tokens but max_len is {max_len}")]
    CompletionTooLong { needed: usize, max_len: usize },
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error("token {0} is not a byte and cannot be decoded")]
    NotAByte(u32),
    #[error("bad split spec {0:?}; expected e.g. train[:95%]")]
    Split(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// UTF-8 bytes as token ids.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<String, DataError> {
    let bytes =
        tokens.iter().map(|&t| u8::try_from(t).map_err(|_| DataError::NotAByte(t))).collect::<Result<Vec<u8>, _>>()?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Decodes byte tokens, skipping special ids.
pub fn decode_lossy(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Tokens with a mask marking the positions the model is trained to predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub label_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_mask.iter().filter(|&&m| m).count()
    }
}

pub fn prompt_text(sample: &InstructSample) -> String {
    match sample.input() {
        Some(input) => format!("### Instruction:\n{}\n\n### Input:\n{input}\n\n### Response:\n", sample.instruction),
        None => format!("### Instruction:\n{}\n\n### Response:\n", sample.instruction),
    }
}

/// `bos + prompt + output + eos`; the mask covers `output + eos`.
pub fn apply_instruct_template(sample: &InstructSample) -> TokenSequence {
    let prompt = tokenize(&prompt_text(sample));
    let output = tokenize(&sample.output);
    let mut tokens = Vec::with_capacity(prompt.len() + output.len() + 2);
    tokens.push(BOS_ID);
    tokens.extend(prompt);
    let completion_start = tokens.len();
    tokens.extend(output);
    tokens.push(EOS_ID);
    let label_mask = (0..tokens.len()).map(|i| i >= completion_start).collect();
    TokenSequence { tokens, label_mask }
}

/// Drops prompt tokens right after BOS until the sequence fits. The
/// completion is never cut.
pub fn truncate_prompt(seq: &TokenSequence, max_len: usize) -> Result<TokenSequence, DataError> {
    if seq.len() <= max_len {
        return Ok(seq.clone());
    }
    let completion_start = seq.label_mask.iter().position(|&m| m).unwrap_or(seq.len());
    let keep_head = usize::from(seq.tokens.first() == Some(&BOS_ID)).min(completion_start);
    let needed = keep_head + (seq.len() - completion_start);
    if needed > max_len {
        return Err(DataError::CompletionTooLong { needed, max_len });
    }
    let cut = seq.len() - max_len;
    let keep = |v: usize| v < keep_head || v >= keep_head + cut;
    Ok(TokenSequence {
        tokens: seq.tokens.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, &t)| t).collect(),
        label_mask: seq.label_mask.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, &m)| m).collect(),
    })
}

/// Collated `[B, S]` arrays ready for the model and loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    /// Next-token targets; [`IGNORE_INDEX`] where nothing is trained.
    pub labels: Vec<i64>,
    pub positions: Vec<usize>,
    pub doc_ids: Vec<usize>,
    /// Real (non-pad) tokens.
    pub non_pad_tokens: usize,
}

impl Batch {
    pub fn to_token_batch(&self) -> Result<TokenBatch, DataError> {
        Ok(TokenBatch::new(self.batch, self.seq_len, self.tokens.clone())?
            .with_positions(self.positions.clone())?
            .with_doc_ids(self.doc_ids.clone())?)
    }

    /// Additive `[B, S, S]` mask: causal and never across documents.
    pub fn document_mask(&self) -> Tensor {
        attention_mask(self.batch, self.seq_len, Some(&self.doc_ids))
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Stacks rows, padding shorter ones with `pad_id` to the longest.
pub fn collate_batch(items: &[PackedSequence], pad_id: u32) -> Result<Batch, DataError> {
    let seq_len = items.iter().map(PackedSequence::len).max().ok_or(DataError::EmptyBatch)?;
    let batch = items.len();
    let mut out = Batch {
        batch,
        seq_len,
        tokens: Vec::with_capacity(batch * seq_len),
        labels: Vec::with_capacity(batch * seq_len),
        positions: Vec::with_capacity(batch * seq_len),
        doc_ids: Vec::with_capacity(batch * seq_len),
        non_pad_tokens: 0,
    };
    for item in items {
        let real = item.len() - item.pad_count;
        let pad_doc = item.num_documents();
        let is_pad = |t: usize| t >= real;
        for t in 0..seq_len {
            let (token, pos, doc) = if t < item.len() {
                (item.tokens[t], item.position_ids[t], item.doc_ids[t])
            } else {
                (pad_id, item.pad_count + (t - item.len()), pad_doc)
            };
            out.tokens.push(token as usize);
            out.positions.push(pos);
            out.doc_ids.push(doc);
            let next_trained = t + 1 < item.len()
                && !is_pad(t)
                && !is_pad(t + 1)
                && item.doc_ids[t + 1] == item.doc_ids[t]
                && item.label_mask[t + 1];
            out.labels.push(if next_trained { i64::from(item.tokens[t + 1]) } else { IGNORE_INDEX });
        }
        out.non_pad_tokens += real;
    }
    Ok(out)
}

/// Pads each sequence to the longest and collates.
pub fn collate_sequences(seqs: &[TokenSequence], pad_id: u32) -> Result<Batch, DataError> {
    let len = seqs.iter().map(TokenSequence::len).max().ok_or(DataError::EmptyBatch)?;
    let rows = pad_sequences(seqs, len)?;
    collate_batch(&rows, pad_id)
}

/// Seeded per-epoch order of `len` items.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}
