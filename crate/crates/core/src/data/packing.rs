use serde::{Deserialize, Serialize};

use super::{DataError, TokenSequence, PAD_ID};

/// Fixed-length row holding one or more documents followed by padding.
///
/// Padding occupies its own document id (one past the last real document),
/// so pad positions never attend to real tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub doc_ids: Vec<usize>,
    pub label_mask: Vec<bool>,
    pub pad_count: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_documents(&self) -> usize {
        let real = self.len() - self.pad_count;
        self.doc_ids[..real].last().map_or(0, |d| d + 1)
    }

    /// Lays out `docs` in order and pads to `len`.
    pub fn from_documents(docs: &[&TokenSequence], len: usize) -> Result<Self, DataError> {
        let used: usize = docs.iter().map(|d| d.len()).sum();
        if used > len {
            return Err(DataError::Packing(format!("{used} tokens do not fit in a row of {len}")));
        }
        let mut p = PackedSequence {
            tokens: Vec::with_capacity(len),
            position_ids: Vec::with_capacity(len),
            doc_ids: Vec::with_capacity(len),
            label_mask: Vec::with_capacity(len),
            pad_count: len - used,
        };
        for (d, doc) in docs.iter().enumerate() {
            p.tokens.extend_from_slice(&doc.tokens);
            p.label_mask.extend_from_slice(&doc.label_mask);
            p.position_ids.extend(0..doc.len());
            p.doc_ids.extend(std::iter::repeat_n(d, doc.len()));
        }
        p.tokens.extend(std::iter::repeat_n(PAD_ID, p.pad_count));
        p.label_mask.extend(std::iter::repeat_n(false, p.pad_count));
        p.position_ids.extend(0..p.pad_count);
        p.doc_ids.extend(std::iter::repeat_n(docs.len(), p.pad_count));
        Ok(p)
    }

    /// One document per row, padded on the right.
    pub fn padded(seq: &TokenSequence, len: usize) -> Result<Self, DataError> {
        PackedSequence::from_documents(&[seq], len)
    }
}

/// Greedy first-fit in corpus order: each sequence goes into the earliest
/// open row with room, otherwise it starts a new row.
pub fn pack_sequences(seqs: &[TokenSequence], pack_len: usize) -> Result<Vec<PackedSequence>, DataError> {
    if pack_len == 0 {
        return Err(DataError::Packing("pack_len must be positive".into()));
    }
    let mut bins: Vec<(usize, Vec<&TokenSequence>)> = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        if seq.len() > pack_len {
            return Err(DataError::Packing(format!(
                "sequence {i} has {} tokens, longer than pack_len {pack_len}; truncate it first",
                seq.len()
            )));
        }
        match bins.iter_mut().find(|(used, _)| used + seq.len() <= pack_len) {
            Some((used, docs)) => {
                *used += seq.len();
                docs.push(seq);
            }
            None => bins.push((seq.len(), vec![seq])),
        }
    }
    bins.iter().map(|(_, docs)| PackedSequence::from_documents(docs, pack_len)).collect()
}

/// Rows padded to `len`, one sequence each (the no-packing baseline).
pub fn pad_sequences(seqs: &[TokenSequence], len: usize) -> Result<Vec<PackedSequence>, DataError> {
    seqs.iter().map(|s| PackedSequence::padded(s, len)).collect()
}

/// Share of positions that are padding.
pub fn padding_fraction(rows: &[PackedSequence]) -> f64 {
    let total: usize = rows.iter().map(PackedSequence::len).sum();
    if total == 0 {
        return 0.0;
    }
    rows.iter().map(|r| r.pad_count).sum::<usize>() as f64 / total as f64
}
