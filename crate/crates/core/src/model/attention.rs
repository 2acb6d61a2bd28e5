use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{deterministic_mode, ops, Parameter, RotaryTable, Tape, Tensor};

use super::{ModelError, Projection};

/// Grouped-query self-attention over externally supplied projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    embed_dim: usize,
    num_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
    q_proj: Projection,
    k_proj: Projection,
    v_proj: Projection,
    output_proj: Projection,
    rope: RotaryTable,
    attn_dropout: f32,
    dropout_rng: Rc<RefCell<ChaCha8Rng>>,
}

/// Per-batch attention context shared by every layer.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    pub batch: usize,
    pub seq_len: usize,
    /// `[S]` or `[B * S]`
    pub positions: Rc<Vec<usize>>,
    /// Additive `[B, S, S]` mask: 0 where attention is allowed, -inf elsewhere.
    pub mask: Tensor,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        embed_dim: usize,
        num_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        q_proj: Projection,
        k_proj: Projection,
        v_proj: Projection,
        output_proj: Projection,
        rope: RotaryTable,
        attn_dropout: f32,
    ) -> Result<Self, ModelError> {
        if num_heads == 0 || num_kv_heads == 0 || head_dim == 0 {
            return Err(ModelError::Config("attention dims must be positive".into()));
        }
        if embed_dim != num_heads * head_dim {
            return Err(ModelError::Config(format!(
                "embed_dim {embed_dim} != num_heads {num_heads} * head_dim {head_dim}"
            )));
        }
        if !num_heads.is_multiple_of(num_kv_heads) {
            return Err(ModelError::Config(format!(
                "num_heads {num_heads} is not divisible by num_kv_heads {num_kv_heads}"
            )));
        }
        let expect = [
            ("q_proj", &q_proj, embed_dim, num_heads * head_dim),
            ("k_proj", &k_proj, embed_dim, num_kv_heads * head_dim),
            ("v_proj", &v_proj, embed_dim, num_kv_heads * head_dim),
            ("output_proj", &output_proj, num_heads * head_dim, embed_dim),
        ];
        for (name, p, i, o) in expect {
            if p.in_dim() != i || p.out_dim() != o {
                return Err(ModelError::Config(format!(
                    "{name} maps {} -> {}, expected {i} -> {o}",
                    p.in_dim(),
                    p.out_dim()
                )));
            }
        }
        if rope.head_dim() != head_dim {
            return Err(ModelError::Config(format!("rope head_dim {} != {head_dim}", rope.head_dim())));
        }
        if !(0.0..1.0).contains(&attn_dropout) {
            return Err(ModelError::Config(format!("attn_dropout {attn_dropout} outside [0, 1)")));
        }
        Ok(MultiHeadAttention {
            embed_dim,
            num_heads,
            num_kv_heads,
            head_dim,
            q_proj,
            k_proj,
            v_proj,
            output_proj,
            rope,
            attn_dropout,
            dropout_rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(0))),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn projections(&self) -> [(&'static str, &Projection); 4] {
        [
            ("q_proj", &self.q_proj),
            ("k_proj", &self.k_proj),
            ("v_proj", &self.v_proj),
            ("output_proj", &self.output_proj),
        ]
    }

    /// Same attention with every projection replaced by `f(name, projection)`.
    pub fn map_projections(
        &self,
        mut f: impl FnMut(&'static str, &Projection) -> Result<Projection, ModelError>,
    ) -> Result<Self, ModelError> {
        MultiHeadAttention::new(
            self.embed_dim,
            self.num_heads,
            self.num_kv_heads,
            self.head_dim,
            f("q_proj", &self.q_proj)?,
            f("k_proj", &self.k_proj)?,
            f("v_proj", &self.v_proj)?,
            f("output_proj", &self.output_proj)?,
            self.rope.clone(),
            self.attn_dropout,
        )
    }

    /// Dropout only runs outside deterministic mode.
    pub fn dropout_active(&self) -> bool {
        self.attn_dropout > 0.0 && !deterministic_mode()
    }

    /// `x: [B, S, E]` -> `[B, S, E]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor, ctx: &AttentionContext) -> Result<Tensor, ModelError> {
        let (b, s) = (ctx.batch, ctx.seq_len);
        let (h, kv, d) = (self.num_heads, self.num_kv_heads, self.head_dim);

        let q = ops::reshape(&self.q_proj.forward(tape, x)?, &[b, s, h, d])?;
        let k = ops::reshape(&self.k_proj.forward(tape, x)?, &[b, s, kv, d])?;
        let v = ops::reshape(&self.v_proj.forward(tape, x)?, &[b, s, kv, d])?;
        let q = ops::rope(&q, &ctx.positions, &self.rope)?;
        let k = ops::rope(&k, &ctx.positions, &self.rope)?;

        // heads first: [heads, B, S, D]
        let q = ops::permute(&q, &[2, 0, 1, 3])?;
        let mut k = ops::permute(&k, &[2, 0, 1, 3])?;
        let mut v = ops::permute(&v, &[2, 0, 1, 3])?;
        if kv != h {
            let group: Vec<usize> = (0..h).map(|i| i / (h / kv)).collect();
            k = ops::index_select(&k, 0, &group)?;
            v = ops::index_select(&v, 0, &group)?;
        }

        let scores = ops::mul_scalar(&ops::matmul_t(&q, &k)?, 1.0 / (d as f32).sqrt())?;
        let scores = ops::add(&scores, &ctx.mask)?;
        let mut probs = ops::softmax(&scores)?;
        if self.dropout_active() {
            probs = ops::dropout(&probs, self.attn_dropout, &mut *self.dropout_rng.borrow_mut())?;
        }
        let out = ops::matmul(&probs, &v)?;
        let out = ops::reshape(&ops::permute(&out, &[1, 2, 0, 3])?, &[b, s, h * d])?;
        self.output_proj.forward(tape, &out)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.projections().iter().flat_map(|(_, p)| p.parameters()).collect()
    }
}

/// Additive causal mask, optionally restricted to same-document pairs.
/// `doc_ids` is `[B * S]`.
pub fn attention_mask(batch: usize, seq_len: usize, doc_ids: Option<&[usize]>) -> Tensor {
    let mut data = vec![f32::NEG_INFINITY; batch * seq_len * seq_len];
    for bi in 0..batch {
        for i in 0..seq_len {
            for j in 0..=i {
                let same = doc_ids.is_none_or(|d| d[bi * seq_len + i] == d[bi * seq_len + j]);
                if same {
                    data[(bi * seq_len + i) * seq_len + j] = 0.0;
                }
            }
        }
    }
    Tensor::new(&[batch, seq_len, seq_len], data).expect("mask shape matches data")
}
