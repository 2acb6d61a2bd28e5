use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, ops, Parameter, RotaryTable, Tape, Tensor};

use super::attention::{attention_mask, AttentionContext};
use super::{
    init, FeedForward, Linear, LoRALinear, ModelError, MultiHeadAttention, Projection, RmsNorm, TransformerLayer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub intermediate_dim: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default)]
    pub attn_dropout: f32,
    #[serde(default)]
    pub tie_word_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_rope_base() -> f32 {
    500_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

impl DecoderConfig {
    pub fn new(
        vocab_size: usize,
        num_layers: usize,
        num_heads: usize,
        num_kv_heads: usize,
        embed_dim: usize,
        max_seq_len: usize,
    ) -> Self {
        DecoderConfig {
            vocab_size,
            num_layers,
            num_heads,
            num_kv_heads,
            embed_dim,
            max_seq_len,
            intermediate_dim: None,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            attn_dropout: 0.0,
            tie_word_embeddings: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads.max(1)
    }

    /// Explicit value, or 8/3 of the embedding rounded up to a multiple of 8.
    pub fn mlp_dim(&self) -> usize {
        self.intermediate_dim.unwrap_or_else(|| (8 * self.embed_dim).div_ceil(3).div_ceil(8) * 8)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("embed_dim", self.embed_dim),
            ("max_seq_len", self.max_seq_len),
            ("intermediate_dim", self.mlp_dim()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(ModelError::Config(format!(
                "num_heads {} is not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::Config(format!("head_dim {} must be even for rotary embeddings", self.head_dim())));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn num_parameters(&self) -> usize {
        let (e, h, kv, d, i, v) =
            (self.embed_dim, self.num_heads, self.num_kv_heads, self.head_dim(), self.mlp_dim(), self.vocab_size);
        let attn = e * h * d + 2 * e * kv * d + h * d * e;
        let layer = attn + 3 * e * i + 2 * e;
        let output = if self.tie_word_embeddings { 0 } else { v * e };
        v * e + self.num_layers * layer + e + output
    }
}

/// Attention projection that can carry a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    QProj,
    KProj,
    VProj,
    OutputProj,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::QProj, LoraTarget::KProj, LoraTarget::VProj, LoraTarget::OutputProj];

    pub fn module_name(self) -> &'static str {
        match self {
            LoraTarget::QProj => "q_proj",
            LoraTarget::KProj => "k_proj",
            LoraTarget::VProj => "v_proj",
            LoraTarget::OutputProj => "output_proj",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.module_name())
    }
}

impl FromStr for LoraTarget {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" | "q_proj" => Ok(LoraTarget::QProj),
            "k" | "k_proj" => Ok(LoraTarget::KProj),
            "v" | "v_proj" => Ok(LoraTarget::VProj),
            "output" | "output_proj" | "o_proj" => Ok(LoraTarget::OutputProj),
            other => Err(ModelError::Config(format!(
                "unknown LoRA target {other:?}; expected one of q_proj, k_proj, v_proj, output_proj"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: BTreeSet<LoraTarget>,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f32, targets: impl IntoIterator<Item = LoraTarget>) -> Self {
        LoraConfig { rank, alpha, targets: targets.into_iter().collect() }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Token ids for a `[batch, seq_len]` forward pass plus per-token positions
/// and optional document ids (packed rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    /// `[B * S]`
    pub positions: Vec<usize>,
    /// `[B * S]`; attention never crosses document boundaries when present.
    pub doc_ids: Option<Vec<usize>>,
}

impl TokenBatch {
    /// Unpacked rows with positions `0..seq_len`.
    pub fn new(batch: usize, seq_len: usize, tokens: Vec<usize>) -> Result<Self, ModelError> {
        if tokens.len() != batch * seq_len {
            return Err(ModelError::Input(format!("{} tokens for a [{batch}, {seq_len}] batch", tokens.len())));
        }
        let positions = (0..batch).flat_map(|_| 0..seq_len).collect();
        Ok(TokenBatch { batch, seq_len, tokens, positions, doc_ids: None })
    }

    pub fn single(tokens: &[usize]) -> Result<Self, ModelError> {
        TokenBatch::new(1, tokens.len(), tokens.to_vec())
    }

    pub fn with_positions(mut self, positions: Vec<usize>) -> Result<Self, ModelError> {
        if positions.len() != self.tokens.len() {
            return Err(ModelError::Input(format!("{} positions for {} tokens", positions.len(), self.tokens.len())));
        }
        self.positions = positions;
        Ok(self)
    }

    pub fn with_doc_ids(mut self, doc_ids: Vec<usize>) -> Result<Self, ModelError> {
        if doc_ids.len() != self.tokens.len() {
            return Err(ModelError::Input(format!("{} doc ids for {} tokens", doc_ids.len(), self.tokens.len())));
        }
        self.doc_ids = Some(doc_ids);
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub enum OutputHead {
    Linear(Linear),
    /// Reuses the token embedding table as the output projection.
    Tied,
}

/// Decoder-only transformer assembled from pre-built modules.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    tok_embeddings: Parameter,
    layers: Vec<TransformerLayer>,
    norm: RmsNorm,
    output: OutputHead,
    max_seq_len: usize,
    activation_checkpointing: bool,
}

impl TransformerDecoder {
    pub fn new(
        tok_embeddings: Parameter,
        layers: Vec<TransformerLayer>,
        norm: RmsNorm,
        output: OutputHead,
        max_seq_len: usize,
    ) -> Result<Self, ModelError> {
        let shape = tok_embeddings.shape();
        if shape.len() != 2 {
            return Err(ModelError::Config(format!("token embeddings must be [vocab, embed], got {shape:?}")));
        }
        let e = shape[1];
        if norm.dim() != e || layers.iter().any(|l| l.attn().embed_dim() != e) {
            return Err(ModelError::Config(format!("module widths disagree with embed_dim {e}")));
        }
        if let OutputHead::Linear(l) = &output {
            if l.in_dim() != e || l.out_dim() != shape[0] {
                return Err(ModelError::Config(format!(
                    "output projection {:?} does not map embed_dim {e} to vocab {}",
                    l.weight().shape(),
                    shape[0]
                )));
            }
        }
        if max_seq_len == 0 {
            return Err(ModelError::Config("max_seq_len must be positive".into()));
        }
        Ok(TransformerDecoder { tok_embeddings, layers, norm, output, max_seq_len, activation_checkpointing: false })
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_embeddings.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.tok_embeddings.shape()[1]
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.output, OutputHead::Tied)
    }

    pub fn activation_checkpointing(&self) -> bool {
        self.activation_checkpointing
    }

    /// Recompute each layer's activations during backward instead of storing them.
    pub fn set_activation_checkpointing(&mut self, enabled: bool) {
        self.activation_checkpointing = enabled;
    }

    /// The `[vocab, embed]` output projection weight (the embedding table when tied).
    pub fn output_weight(&self) -> &Parameter {
        match &self.output {
            OutputHead::Linear(l) => l.weight(),
            OutputHead::Tied => &self.tok_embeddings,
        }
    }

    /// Every parameter in module order; a tied weight appears once.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.tok_embeddings.clone()];
        for layer in &self.layers {
            out.extend(layer.parameters());
        }
        out.extend(self.norm.parameters());
        if let OutputHead::Linear(l) = &self.output {
            out.extend(l.parameters());
        }
        out
    }

    pub fn trainable_parameters(&self) -> Vec<Parameter> {
        self.parameters().into_iter().filter(Parameter::requires_grad).collect()
    }

    pub fn named_parameters(&self) -> HashMap<String, Parameter> {
        self.parameters().into_iter().map(|p| (p.name().to_string(), p)).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Parameter::numel).sum()
    }

    pub fn num_trainable_parameters(&self) -> usize {
        self.trainable_parameters().iter().map(Parameter::numel).sum()
    }

    fn validate_input(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        if batch.seq_len == 0 || batch.batch == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if batch.seq_len > self.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: batch.seq_len, max: self.max_seq_len });
        }
        let vocab = self.vocab_size();
        if let Some(&token) = batch.tokens.iter().find(|&&t| t >= vocab) {
            return Err(ModelError::TokenOutOfRange { token, vocab });
        }
        if let Some(&pos) = batch.positions.iter().find(|&&p| p >= self.max_seq_len) {
            return Err(ModelError::Input(format!("position {pos} exceeds max_seq_len {}", self.max_seq_len)));
        }
        Ok(())
    }

    /// Logits `[B, S, V]`, or final hidden states `[B, S, E]` when
    /// `return_hidden` is set so a loss can fuse the output projection.
    pub fn forward(&self, tape: &Tape, batch: &TokenBatch, return_hidden: bool) -> Result<Tensor, ModelError> {
        self.validate_input(batch)?;
        let (b, s) = (batch.batch, batch.seq_len);
        let ctx = AttentionContext {
            batch: b,
            seq_len: s,
            positions: Rc::new(batch.positions.clone()),
            mask: attention_mask(b, s, batch.doc_ids.as_deref()),
        };
        let mut x = ops::embedding(&self.tok_embeddings.var(tape), &batch.tokens, &[b, s])?;
        for layer in &self.layers {
            x = if self.activation_checkpointing {
                if layer.attn().dropout_active() {
                    return Err(ModelError::Config(
                        "attention dropout cannot be combined with activation checkpointing".into(),
                    ));
                }
                let (layer, ctx) = (layer.clone(), ctx.clone());
                checkpoint(tape, &[x], move |tape, xs| {
                    layer.forward(tape, &xs[0], &ctx).map_err(ModelError::into_tensor_error)
                })?
            } else {
                layer.forward(tape, &x, &ctx)?
            };
        }
        let h = self.norm.forward(tape, &x)?;
        if return_hidden {
            return Ok(h);
        }
        Ok(ops::matmul_t(&h, &self.output_weight().var(tape))?)
    }

    /// Rebuilds the decoder with every parameter passed through `f` and every
    /// attention projection through `proj`.
    pub fn map_parameters(
        &self,
        f: &mut super::ParamMap<'_>,
        mut proj: impl FnMut(usize, &'static str, &Projection, &mut super::ParamMap<'_>) -> Result<Projection, ModelError>,
    ) -> Result<Self, ModelError> {
        let tok = f(&self.tok_embeddings)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.map_parameters(f, |name, p, f| proj(i, name, p, f))?);
        }
        let norm = self.norm.map_parameters(f)?;
        let output = match &self.output {
            OutputHead::Linear(l) => OutputHead::Linear(l.map_parameters(f)?),
            OutputHead::Tied => OutputHead::Tied,
        };
        let mut out = TransformerDecoder::new(tok, layers, norm, output, self.max_seq_len)?;
        out.activation_checkpointing = self.activation_checkpointing;
        Ok(out)
    }

    /// Independent copy: fresh parameters with the same names, values and
    /// trainability.
    pub fn deep_copy(&self) -> Result<Self, ModelError> {
        self.map_parameters(&mut copy_parameter, |_, _, p, f| p.map_parameters(f))
    }

    /// Independent dense decoder whose adapted projections carry
    /// `base + scaling * B A`.
    pub fn merge_lora(&self) -> Result<Self, ModelError> {
        self.map_parameters(&mut copy_parameter, |_, _, p, f| match p {
            Projection::Dense(l) => Ok(Projection::Dense(l.map_parameters(f)?)),
            Projection::Lora(_) => {
                let merged = p.merged()?;
                merged.weight().set_requires_grad(true);
                Ok(Projection::Dense(merged))
            }
        })
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| l.attn().projections().iter().any(|(_, p)| matches!(p, Projection::Lora(_))))
    }

    /// Copies of all parameter values, in [`TransformerDecoder::parameters`] order.
    pub fn state(&self) -> Vec<NamedTensor> {
        self.parameters().iter().map(NamedTensor::from_parameter).collect()
    }

    /// Overwrites parameter values by name. Every parameter must be covered
    /// exactly once and shapes must match.
    pub fn load_state(&self, state: &[NamedTensor]) -> Result<(), ModelError> {
        let params = self.named_parameters();
        let mut seen = BTreeSet::new();
        for t in state {
            let p = params.get(&t.name).ok_or_else(|| ModelError::State(format!("unexpected tensor {}", t.name)))?;
            if p.shape() != t.shape {
                return Err(ModelError::State(format!("{}: shape {:?} vs parameter {:?}", t.name, t.shape, p.shape())));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(ModelError::State(format!("duplicate tensor {}", t.name)));
            }
        }
        let missing: Vec<&str> = params.keys().map(String::as_str).filter(|n| !seen.contains(n)).collect();
        if !missing.is_empty() {
            let mut missing = missing;
            missing.sort_unstable();
            return Err(ModelError::State(format!("missing tensors: {}", missing.join(", "))));
        }
        for t in state {
            params[&t.name].set_value(&t.data)?;
        }
        Ok(())
    }
}

fn copy_parameter(p: &Parameter) -> Result<Parameter, ModelError> {
    let copy = Parameter::new(p.name(), &p.shape(), p.to_vec())?;
    copy.set_requires_grad(p.requires_grad());
    Ok(copy)
}

/// Detached parameter value with its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_parameter(p: &Parameter) -> Self {
        NamedTensor { name: p.name().to_string(), shape: p.shape(), data: p.to_vec() }
    }

    pub fn bits_eq(&self, other: &NamedTensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn dense(seed: u64, name: String, out: usize, inp: usize) -> Result<Linear, ModelError> {
    Linear::new(init::normal(seed, &name, &[out, inp], init::DEFAULT_STD)?)
}

fn projection(
    cfg: &DecoderConfig,
    lora: Option<&LoraConfig>,
    layer: usize,
    target: LoraTarget,
    out: usize,
    inp: usize,
) -> Result<Projection, ModelError> {
    let base = dense(cfg.seed, format!("layers.{layer}.attn.{}.weight", target.module_name()), out, inp)?;
    match lora {
        Some(l) if l.targets.contains(&target) => {
            Ok(LoRALinear::init(base.weight().clone(), l.rank, l.alpha, cfg.seed)?.into())
        }
        _ => Ok(base.into()),
    }
}

fn build(cfg: &DecoderConfig, lora: Option<&LoraConfig>) -> Result<TransformerDecoder, ModelError> {
    cfg.validate()?;
    let (e, h, kv, d, hidden) = (cfg.embed_dim, cfg.num_heads, cfg.num_kv_heads, cfg.head_dim(), cfg.mlp_dim());
    let rope = RotaryTable::new(d, cfg.max_seq_len, cfg.rope_base)?;
    let seed = cfg.seed;

    let tok_embeddings = init::normal(seed, "tok_embeddings.weight", &[cfg.vocab_size, e], init::DEFAULT_STD)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let attn = MultiHeadAttention::new(
            e,
            h,
            kv,
            d,
            projection(cfg, lora, i, LoraTarget::QProj, h * d, e)?,
            projection(cfg, lora, i, LoraTarget::KProj, kv * d, e)?,
            projection(cfg, lora, i, LoraTarget::VProj, kv * d, e)?,
            projection(cfg, lora, i, LoraTarget::OutputProj, e, h * d)?,
            rope.clone(),
            cfg.attn_dropout,
        )?;
        let mlp = FeedForward::new(
            dense(seed, format!("layers.{i}.mlp.w1.weight"), hidden, e)?,
            dense(seed, format!("layers.{i}.mlp.w2.weight"), e, hidden)?,
            dense(seed, format!("layers.{i}.mlp.w3.weight"), hidden, e)?,
        )?;
        let sa_norm = RmsNorm::new(init::filled(&format!("layers.{i}.sa_norm.scale"), &[e], 1.0)?, cfg.norm_eps)?;
        let mlp_norm = RmsNorm::new(init::filled(&format!("layers.{i}.mlp_norm.scale"), &[e], 1.0)?, cfg.norm_eps)?;
        layers.push(TransformerLayer::new(attn, mlp, sa_norm, mlp_norm)?);
    }
    let norm = RmsNorm::new(init::filled("norm.scale", &[e], 1.0)?, cfg.norm_eps)?;
    let output = if cfg.tie_word_embeddings {
        OutputHead::Tied
    } else {
        OutputHead::Linear(dense(seed, "output.weight".into(), cfg.vocab_size, e)?)
    };
    TransformerDecoder::new(tok_embeddings, layers, norm, output, cfg.max_seq_len)
}

/// Dense Llama-style decoder.
pub fn build_decoder(cfg: &DecoderConfig) -> Result<TransformerDecoder, ModelError> {
    build(cfg, None)
}

/// Same architecture with LoRA adapters on the targeted attention projections.
/// Everything except the adapters is frozen.
pub fn build_lora_decoder(cfg: &DecoderConfig, lora: &LoraConfig) -> Result<TransformerDecoder, ModelError> {
    if lora.targets.is_empty() {
        return Err(ModelError::Config("LoRA target set is empty".into()));
    }
    if lora.rank == 0 {
        return Err(ModelError::Config("LoRA rank must be at least 1".into()));
    }
    let decoder = build(cfg, Some(lora))?;
    for p in decoder.parameters() {
        p.set_requires_grad(p.name().contains(".lora_"));
    }
    Ok(decoder)
}
