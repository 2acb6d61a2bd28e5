//! Activation checkpointing: keep a segment's inputs, recompute its
//! intermediates during backward.

use std::rc::Rc;

use super::param::{parameters_created, Parameter};
use super::tape::Tape;
use super::tensor::Tensor;
use super::{deterministic_mode, TensorError};

pub type ReplayFn = Rc<dyn Fn(&Tape, &[Tensor]) -> Result<Tensor, TensorError>>;

pub(crate) struct CheckpointRecord {
    pub(crate) inputs: Vec<Tensor>,
    replay: ReplayFn,
    param_versions: Vec<(Parameter, u64)>,
    checksum: Option<u64>,
}

/// Runs `replay` without recording intermediates and records a single node
/// that re-executes it during backward.
///
/// `replay` must be a pure function of its inputs and of the parameters it
/// reads. Gradients match an uncheckpointed run bit for bit.
pub fn checkpoint(
    tape: &Tape,
    inputs: &[Tensor],
    replay: impl Fn(&Tape, &[Tensor]) -> Result<Tensor, TensorError> + 'static,
) -> Result<Tensor, TensorError> {
    let replay: ReplayFn = Rc::new(replay);
    let scratch = Tape::no_grad();
    let detached: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let created = parameters_created();
    let out = replay(&scratch, &detached)?;
    if parameters_created() != created {
        return Err(TensorError::ReplayAllocatedParameters);
    }
    let trainable: Vec<Parameter> = scratch.used_parameters().into_iter().filter(Parameter::requires_grad).collect();

    for t in inputs {
        if let Some(n) = t.node() {
            tape.check_ref("checkpoint", n)?;
        }
    }
    let any_input = inputs.iter().any(Tensor::requires_grad);
    if !tape.is_recording() || (!any_input && trainable.is_empty()) {
        return Ok(out.detach());
    }

    let mut ids: Vec<Option<usize>> = inputs.iter().map(Tensor::node_id).collect();
    ids.extend(trainable.iter().map(|p| Some(tape.param_leaf_id(p))));
    let record = CheckpointRecord {
        inputs: detached,
        replay,
        param_versions: trainable.iter().map(|p| (p.clone(), p.version())).collect(),
        checksum: deterministic_mode().then(|| checksum(out.data())),
    };
    Ok(tape.record_checkpoint(&out, ids, record))
}

pub(crate) fn replay(record: &CheckpointRecord, tape: &Tape, inputs: &[Tensor]) -> Result<Tensor, TensorError> {
    for (p, version) in &record.param_versions {
        if p.version() != *version {
            return Err(TensorError::ParameterModifiedBeforeReplay { name: p.name().to_string() });
        }
    }
    let created = parameters_created();
    let out = (record.replay)(tape, inputs)?;
    if parameters_created() != created {
        return Err(TensorError::ReplayAllocatedParameters);
    }
    if let Some(expected) = record.checksum {
        if checksum(out.data()) != expected {
            return Err(TensorError::NonDeterministicReplay);
        }
    }
    Ok(out)
}

// FNV-1a over the bit patterns.
fn checksum(data: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
