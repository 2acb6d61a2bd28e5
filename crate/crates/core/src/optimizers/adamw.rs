use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::quant::{MomentKind, QuantizedMoment, BLOCK_SIZE};
use super::{AdamWHyper, OptimError, Precision};
use crate::autograd::{Buffer, Category, Parameter};

/// Moments for one parameter.
#[derive(Debug, Clone)]
pub enum Moments {
    Full { m: Buffer, v: Buffer },
    Quantized { m: QuantizedMoment, v: QuantizedMoment },
}

/// Per-parameter AdamW state. Each parameter keeps its own step count.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub moments: Moments,
}

impl AdamWState {
    pub fn new(numel: usize, precision: Precision) -> Self {
        let moments = match precision {
            Precision::F32 => Moments::Full {
                m: Buffer::new(vec![0.0; numel], Category::OptimizerState),
                v: Buffer::new(vec![0.0; numel], Category::OptimizerState),
            },
            Precision::Int8 => Moments::Quantized {
                m: QuantizedMoment::zeros(MomentKind::Signed, numel),
                v: QuantizedMoment::zeros(MomentKind::SqrtUnsigned, numel),
            },
        };
        AdamWState { step: 0, moments }
    }

    pub fn numel(&self) -> usize {
        match &self.moments {
            Moments::Full { m, .. } => m.data().len(),
            Moments::Quantized { m, .. } => m.numel(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self.moments {
            Moments::Full { .. } => Precision::F32,
            Moments::Quantized { .. } => Precision::Int8,
        }
    }

    /// Bytes held by the two moments (scales included).
    pub fn payload_bytes(&self) -> usize {
        match &self.moments {
            Moments::Full { m, v } => (m.data().len() + v.data().len()) * 4,
            Moments::Quantized { m, v } => m.payload_bytes() + v.payload_bytes(),
        }
    }

    /// Moments as f32 (dequantized for the 8-bit variant).
    pub fn moments_f32(&self) -> (Vec<f32>, Vec<f32>) {
        match &self.moments {
            Moments::Full { m, v } => (m.data().to_vec(), v.data().to_vec()),
            Moments::Quantized { m, v } => (m.dequantize(), v.dequantize()),
        }
    }

    pub fn to_record(&self) -> StateRecord {
        let moments = match &self.moments {
            Moments::Full { m, v } => MomentRecord::F32 { m: m.data().to_vec(), v: v.data().to_vec() },
            Moments::Quantized { m, v } => MomentRecord::Int8 {
                m_codes: m.codes().to_vec(),
                m_scales: m.scales().to_vec(),
                v_codes: v.codes().to_vec(),
                v_scales: v.scales().to_vec(),
            },
        };
        StateRecord { step: self.step, moments }
    }

    pub fn from_record(name: &str, record: &StateRecord, numel: usize) -> Result<Self, OptimError> {
        let bad = |reason: String| OptimError::StateMismatch { name: name.to_string(), reason };
        let blocks = numel.div_ceil(BLOCK_SIZE);
        let moments = match &record.moments {
            MomentRecord::F32 { m, v } => {
                if m.len() != numel || v.len() != numel {
                    return Err(bad(format!(
                        "moments have {} and {} entries, parameter has {numel}",
                        m.len(),
                        v.len()
                    )));
                }
                Moments::Full {
                    m: Buffer::new(m.clone(), Category::OptimizerState),
                    v: Buffer::new(v.clone(), Category::OptimizerState),
                }
            }
            MomentRecord::Int8 { m_codes, m_scales, v_codes, v_scales } => {
                if m_codes.len() != numel || v_codes.len() != numel {
                    return Err(bad(format!(
                        "codes have {} and {} entries, parameter has {numel}",
                        m_codes.len(),
                        v_codes.len()
                    )));
                }
                if m_scales.len() != blocks || v_scales.len() != blocks {
                    return Err(bad(format!("expected {blocks} block scales")));
                }
                Moments::Quantized {
                    m: QuantizedMoment::from_parts(MomentKind::Signed, m_codes.clone(), m_scales.clone()),
                    v: QuantizedMoment::from_parts(MomentKind::SqrtUnsigned, v_codes.clone(), v_scales.clone()),
                }
            }
        };
        Ok(AdamWState { step: record.step, moments })
    }
}

/// Serializable form of [`AdamWState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub step: u64,
    pub moments: MomentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "precision", rename_all = "snake_case")]
pub enum MomentRecord {
    F32 { m: Vec<f32>, v: Vec<f32> },
    Int8 { m_codes: Vec<u8>, m_scales: Vec<f32>, v_codes: Vec<u8>, v_scales: Vec<f32> },
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStateDict {
    pub states: BTreeMap<String, StateRecord>,
}

fn adam_update(theta: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], step: u64, h: &AdamWHyper, lr: f32) {
    let decay = 1.0 - lr * h.weight_decay;
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..theta.len() {
        theta[i] *= decay;
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// One AdamW step on a single parameter with decoupled, multiplicative
/// weight decay applied before the Adam term.
pub fn adamw_step(
    param: &Parameter,
    grad: &[f32],
    state: &mut AdamWState,
    hyper: &AdamWHyper,
    lr: f32,
) -> Result<(), OptimError> {
    if grad.len() != param.numel() || state.numel() != param.numel() {
        return Err(OptimError::StateMismatch {
            name: param.name().to_string(),
            reason: format!(
                "gradient has {} entries, state {}, parameter {}",
                grad.len(),
                state.numel(),
                param.numel()
            ),
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { name: param.name().to_string(), index });
    }
    state.step += 1;
    let step = state.step;
    match &mut state.moments {
        Moments::Full { m, v } => {
            param.update(|theta| adam_update(theta, grad, m.data_mut(), v.data_mut(), step, hyper, lr));
        }
        Moments::Quantized { m, v } => {
            let mut mb = [0.0f32; BLOCK_SIZE];
            let mut vb = [0.0f32; BLOCK_SIZE];
            param.update(|theta| {
                for (b, (th, g)) in theta.chunks_mut(BLOCK_SIZE).zip(grad.chunks(BLOCK_SIZE)).enumerate() {
                    let n = th.len();
                    m.load_block(b, &mut mb[..n]);
                    v.load_block(b, &mut vb[..n]);
                    adam_update(th, g, &mut mb[..n], &mut vb[..n], step, hyper, lr);
                    m.store_block(b, &mb[..n]);
                    v.store_block(b, &vb[..n]);
                }
            });
        }
    }
    Ok(())
}

/// Shared bookkeeping for the standard and in-backward optimizers.
pub(crate) struct StateTable {
    pub(crate) states: BTreeMap<String, AdamWState>,
}

impl StateTable {
    pub(crate) fn new(params: &[Parameter], precision: Precision) -> Result<Self, OptimError> {
        let mut states = BTreeMap::new();
        for p in params {
            if states.insert(p.name().to_string(), AdamWState::new(p.numel(), precision)).is_some() {
                return Err(OptimError::DuplicateName(p.name().to_string()));
            }
        }
        Ok(StateTable { states })
    }

    pub(crate) fn state_dict(&self) -> OptimizerStateDict {
        OptimizerStateDict { states: self.states.iter().map(|(k, s)| (k.clone(), s.to_record())).collect() }
    }

    pub(crate) fn load(&mut self, dict: &OptimizerStateDict) -> Result<(), OptimError> {
        let missing: Vec<String> = self.states.keys().filter(|k| !dict.states.contains_key(*k)).cloned().collect();
        let unexpected: Vec<String> = dict.states.keys().filter(|k| !self.states.contains_key(*k)).cloned().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(OptimError::StateNames { missing, unexpected });
        }
        let mut loaded = BTreeMap::new();
        for (name, current) in &self.states {
            let state = AdamWState::from_record(name, &dict.states[name], current.numel())?;
            if state.precision() != current.precision() {
                return Err(OptimError::StateMismatch {
                    name: name.clone(),
                    reason: format!("state is {:?}, optimizer is {:?}", state.precision(), current.precision()),
                });
            }
            loaded.insert(name.clone(), state);
        }
        self.states = loaded;
        Ok(())
    }

    pub(crate) fn payload_bytes(&self) -> usize {
        self.states.values().map(AdamWState::payload_bytes).sum()
    }
}

/// AdamW over a set of parameters, stepped explicitly after backward.
pub struct AdamW {
    hyper: AdamWHyper,
    lr: f32,
    params: Vec<Parameter>,
    table: StateTable,
}

impl AdamW {
    /// Frozen parameters are skipped.
    pub fn new(params: &[Parameter], hyper: AdamWHyper, precision: Precision) -> Result<Self, OptimError> {
        hyper.validate()?;
        let params: Vec<Parameter> = params.iter().filter(|p| p.requires_grad()).cloned().collect();
        let table = StateTable::new(&params, precision)?;
        Ok(AdamW { lr: hyper.lr, hyper, params, table })
    }

    pub fn hyper(&self) -> &AdamWHyper {
        &self.hyper
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn state(&self, name: &str) -> Option<&AdamWState> {
        self.table.states.get(name)
    }

    /// Updates every parameter that holds a gradient.
    pub fn step(&mut self) -> Result<(), OptimError> {
        for p in &self.params {
            let Some(grad) = p.grad() else { continue };
            let state = self.table.states.get_mut(p.name()).expect("state exists for every managed parameter");
            adamw_step(p, grad.data(), state, &self.hyper, self.lr)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn state_dict(&self) -> OptimizerStateDict {
        self.table.state_dict()
    }

    pub fn load_state_dict(&mut self, dict: &OptimizerStateDict) -> Result<(), OptimError> {
        self.table.load(dict)
    }

    pub fn state_payload_bytes(&self) -> usize {
        self.table.payload_bytes()
    }
}
