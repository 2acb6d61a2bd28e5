use crate::autograd::{ops, Parameter, Tape, Tensor};

use super::{init, ModelError};

/// Bias-free projection `x @ weight^T` with `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Parameter,
}

impl Linear {
    pub fn new(weight: Parameter) -> Result<Self, ModelError> {
        if weight.shape().len() != 2 {
            return Err(ModelError::Config(format!(
                "linear weight {} must be 2-D, got {:?}",
                weight.name(),
                weight.shape()
            )));
        }
        Ok(Linear { weight })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(ops::matmul_t(x, &self.weight.var(tape))?)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.weight.clone()]
    }

    pub fn map_parameters(&self, f: &mut ParamMap<'_>) -> Result<Self, ModelError> {
        Linear::new(f(&self.weight)?)
    }
}

/// Parameter rewrite applied by the `map_parameters` methods.
pub type ParamMap<'a> = dyn FnMut(&Parameter) -> Result<Parameter, ModelError> + 'a;

/// Frozen base projection plus a trainable low-rank update:
/// `x W^T + (alpha / rank) * (x A^T) B^T`.
#[derive(Debug, Clone)]
pub struct LoRALinear {
    base: Parameter,
    lora_a: Parameter,
    lora_b: Parameter,
    rank: usize,
    alpha: f32,
}

impl LoRALinear {
    pub fn new(base: Parameter, lora_a: Parameter, lora_b: Parameter, alpha: f32) -> Result<Self, ModelError> {
        let (bs, a, b) = (base.shape(), lora_a.shape(), lora_b.shape());
        if bs.len() != 2 || a.len() != 2 || b.len() != 2 || a[1] != bs[1] || b[0] != bs[0] || a[0] != b[1] {
            return Err(ModelError::Config(format!(
                "LoRA shapes do not compose: base {bs:?}, lora_a {a:?}, lora_b {b:?}"
            )));
        }
        let rank = a[0];
        if rank == 0 || rank > bs[0].min(bs[1]) {
            return Err(ModelError::Config(format!(
                "LoRA rank {rank} must be in 1..={} for {}",
                bs[0].min(bs[1]),
                base.name()
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ModelError::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        base.set_requires_grad(false);
        Ok(LoRALinear { base, lora_a, lora_b, rank, alpha })
    }

    /// Adapter around `base` with `lora_a ~ N(0, 1/rank)` and `lora_b = 0`.
    pub fn init(base: Parameter, rank: usize, alpha: f32, seed: u64) -> Result<Self, ModelError> {
        let shape = base.shape();
        let prefix = base.name().strip_suffix(".weight").unwrap_or(base.name()).to_string();
        if shape.len() != 2 || rank == 0 || rank > shape[0].min(shape[1]) {
            return Err(ModelError::Config(format!(
                "LoRA rank {rank} must be in 1..={} for {}",
                shape.iter().copied().min().unwrap_or(0),
                base.name()
            )));
        }
        let a = init::normal(seed, &format!("{prefix}.lora_a.weight"), &[rank, shape[1]], 1.0 / rank as f32)?;
        let b = init::filled(&format!("{prefix}.lora_b.weight"), &[shape[0], rank], 0.0)?;
        LoRALinear::new(base, a, b, alpha)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn base(&self) -> &Parameter {
        &self.base
    }

    pub fn lora_a(&self) -> &Parameter {
        &self.lora_a
    }

    pub fn lora_b(&self) -> &Parameter {
        &self.lora_b
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        let base = ops::matmul_t(x, &self.base.var(tape))?;
        let down = ops::matmul_t(x, &self.lora_a.var(tape))?;
        let up = ops::matmul_t(&down, &self.lora_b.var(tape))?;
        Ok(ops::add(&base, &ops::mul_scalar(&up, self.scaling())?)?)
    }

    /// `W + scaling * B A`.
    pub fn merged_weight(&self) -> Vec<f32> {
        let (out, inp) = (self.base.shape()[0], self.base.shape()[1]);
        let (a, b) = (self.lora_a.to_vec(), self.lora_b.to_vec());
        let mut delta = vec![0.0f32; out * inp];
        ops::mm(&b, &a, out, self.rank, inp, &mut delta);
        let s = self.scaling();
        self.base.to_vec().iter().zip(&delta).map(|(w, d)| w + s * d).collect()
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.base.clone(), self.lora_a.clone(), self.lora_b.clone()]
    }

    pub fn map_parameters(&self, f: &mut ParamMap<'_>) -> Result<Self, ModelError> {
        LoRALinear::new(f(&self.base)?, f(&self.lora_a)?, f(&self.lora_b)?, self.alpha)
    }
}

/// A projection slot that accepts either a dense or a LoRA module.
#[derive(Debug, Clone)]
pub enum Projection {
    Dense(Linear),
    Lora(LoRALinear),
}

impl Projection {
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Projection::Dense(l) => l.forward(tape, x),
            Projection::Lora(l) => l.forward(tape, x),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Projection::Dense(l) => l.in_dim(),
            Projection::Lora(l) => l.base.shape()[1],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Dense(l) => l.out_dim(),
            Projection::Lora(l) => l.base.shape()[0],
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        match self {
            Projection::Dense(l) => l.parameters(),
            Projection::Lora(l) => l.parameters(),
        }
    }

    pub fn map_parameters(&self, f: &mut ParamMap<'_>) -> Result<Self, ModelError> {
        Ok(match self {
            Projection::Dense(l) => Projection::Dense(l.map_parameters(f)?),
            Projection::Lora(l) => Projection::Lora(l.map_parameters(f)?),
        })
    }

    /// Dense equivalent; LoRA updates are folded into a fresh weight.
    pub fn merged(&self) -> Result<Linear, ModelError> {
        match self {
            Projection::Dense(l) => {
                let w = l.weight();
                Linear::new(Parameter::new(w.name(), &w.shape(), w.to_vec())?)
            }
            Projection::Lora(l) => Linear::new(Parameter::new(l.base.name(), &l.base.shape(), l.merged_weight())?),
        }
    }
}

impl From<Linear> for Projection {
    fn from(l: Linear) -> Self {
        Projection::Dense(l)
    }
}

impl From<LoRALinear> for Projection {
    fn from(l: LoRALinear) -> Self {
        Projection::Lora(l)
    }
}
