use crate::autograd::{ops, Parameter, Tape, Tensor};

use super::{AttentionContext, Linear, ModelError, MultiHeadAttention, ParamMap, Projection};

#[derive(Debug, Clone)]
pub struct RmsNorm {
    scale: Parameter,
    eps: f32,
}

impl RmsNorm {
    pub fn new(scale: Parameter, eps: f32) -> Result<Self, ModelError> {
        if scale.shape().len() != 1 {
            return Err(ModelError::Config(format!("norm scale must be 1-D, got {:?}", scale.shape())));
        }
        if !(eps > 0.0) {
            return Err(ModelError::Config(format!("norm eps must be positive, got {eps}")));
        }
        Ok(RmsNorm { scale, eps })
    }

    pub fn dim(&self) -> usize {
        self.scale.shape()[0]
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(ops::rms_norm(x, &self.scale.var(tape), self.eps)?)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.scale.clone()]
    }

    pub fn map_parameters(&self, f: &mut ParamMap<'_>) -> Result<Self, ModelError> {
        RmsNorm::new(f(&self.scale)?, self.eps)
    }
}

/// SiLU-gated feed-forward: `w2(silu(w1 x) * w3 x)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    w1: Linear,
    w2: Linear,
    w3: Linear,
}

impl FeedForward {
    pub fn new(w1: Linear, w2: Linear, w3: Linear) -> Result<Self, ModelError> {
        if w1.out_dim() != w3.out_dim()
            || w1.in_dim() != w3.in_dim()
            || w2.in_dim() != w1.out_dim()
            || w2.out_dim() != w1.in_dim()
        {
            return Err(ModelError::Config(format!(
                "feed-forward shapes do not compose: w1 {:?}, w2 {:?}, w3 {:?}",
                w1.weight().shape(),
                w2.weight().shape(),
                w3.weight().shape()
            )));
        }
        Ok(FeedForward { w1, w2, w3 })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.out_dim()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        let gate = ops::silu(&self.w1.forward(tape, x)?)?;
        let up = self.w3.forward(tape, x)?;
        self.w2.forward(tape, &ops::mul(&gate, &up)?)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        [&self.w1, &self.w2, &self.w3].iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn map_parameters(&self, f: &mut ParamMap<'_>) -> Result<Self, ModelError> {
        FeedForward::new(self.w1.map_parameters(f)?, self.w2.map_parameters(f)?, self.w3.map_parameters(f)?)
    }
}

/// Pre-norm block: `x + attn(sa_norm(x))`, then `h + mlp(mlp_norm(h))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub(crate) attn: MultiHeadAttention,
    mlp: FeedForward,
    sa_norm: RmsNorm,
    mlp_norm: RmsNorm,
}

impl TransformerLayer {
    pub fn new(
        attn: MultiHeadAttention,
        mlp: FeedForward,
        sa_norm: RmsNorm,
        mlp_norm: RmsNorm,
    ) -> Result<Self, ModelError> {
        let e = attn.embed_dim();
        if sa_norm.dim() != e || mlp_norm.dim() != e {
            return Err(ModelError::Config(format!(
                "norm dims {} / {} != embed_dim {e}",
                sa_norm.dim(),
                mlp_norm.dim()
            )));
        }
        Ok(TransformerLayer { attn, mlp, sa_norm, mlp_norm })
    }

    pub fn attn(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn mlp(&self) -> &FeedForward {
        &self.mlp
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, ctx: &AttentionContext) -> Result<Tensor, ModelError> {
        let h = ops::add(x, &self.attn.forward(tape, &self.sa_norm.forward(tape, x)?, ctx)?)?;
        Ok(ops::add(&h, &self.mlp.forward(tape, &self.mlp_norm.forward(tape, &h)?)?)?)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.sa_norm.parameters();
        out.extend(self.attn.parameters());
        out.extend(self.mlp_norm.parameters());
        out.extend(self.mlp.parameters());
        out
    }

    /// Rebuilds the layer: attention projections go through `proj`, every
    /// other parameter through `f`.
    pub fn map_parameters(
        &self,
        f: &mut ParamMap<'_>,
        mut proj: impl FnMut(&'static str, &Projection, &mut ParamMap<'_>) -> Result<Projection, ModelError>,
    ) -> Result<Self, ModelError> {
        let sa_norm = self.sa_norm.map_parameters(f)?;
        let attn = self.attn.map_projections(|name, p| proj(name, p, &mut *f))?;
        let mlp_norm = self.mlp_norm.map_parameters(f)?;
        let mlp = self.mlp.map_parameters(f)?;
        TransformerLayer::new(attn, mlp, sa_norm, mlp_norm)
    }
}
