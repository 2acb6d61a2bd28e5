use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::adamw::{adamw_step, OptimizerStateDict, StateTable};
use super::{AdamWHyper, OptimError, Precision};
use crate::autograd::Parameter;

struct Shared {
    hyper: AdamWHyper,
    lr: Cell<f32>,
    table: RefCell<StateTable>,
    error: RefCell<Option<OptimError>>,
    updates: Cell<u64>,
}

/// AdamW applied inside the backward pass. Each parameter's hook steps that
/// parameter as soon as its gradient is final, then frees the gradient.
///
/// There is no `step()`: updates happen during `backward`. Errors raised
/// inside a hook are held until [`InBackwardOptimizer::take_error`].
pub struct InBackwardOptimizer {
    params: Vec<Parameter>,
    shared: Rc<Shared>,
}

/// Installs one hook per trainable parameter.
pub fn attach_in_backward(
    params: &[Parameter],
    hyper: AdamWHyper,
    precision: Precision,
    gradient_accumulation_steps: usize,
) -> Result<InBackwardOptimizer, OptimError> {
    if gradient_accumulation_steps != 1 {
        return Err(OptimError::AccumulationUnsupported { steps: gradient_accumulation_steps });
    }
    hyper.validate()?;
    let params: Vec<Parameter> = params.iter().filter(|p| p.requires_grad()).cloned().collect();
    if let Some(p) = params.iter().find(|p| p.has_hook()) {
        return Err(OptimError::HookInstalled(p.name().to_string()));
    }
    let shared = Rc::new(Shared {
        lr: Cell::new(hyper.lr),
        hyper,
        table: RefCell::new(StateTable::new(&params, precision)?),
        error: RefCell::new(None),
        updates: Cell::new(0),
    });
    for p in &params {
        let shared = Rc::clone(&shared);
        let installed = p.register_post_accumulate_grad_hook(move |param| {
            let Some(grad) = param.take_grad() else { return };
            let mut table = shared.table.borrow_mut();
            let state = table.states.get_mut(param.name()).expect("state exists for every hooked parameter");
            match adamw_step(param, grad.data(), state, &shared.hyper, shared.lr.get()) {
                Ok(()) => shared.updates.set(shared.updates.get() + 1),
                Err(e) => {
                    shared.error.borrow_mut().get_or_insert(e);
                }
            }
        });
        if let Err(e) = installed {
            return Err(OptimError::from(e));
        }
    }
    Ok(InBackwardOptimizer { params, shared })
}

impl InBackwardOptimizer {
    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn hyper(&self) -> &AdamWHyper {
        &self.shared.hyper
    }

    pub fn lr(&self) -> f32 {
        self.shared.lr.get()
    }

    /// Learning rate every hook reads during the next backward pass.
    pub fn set_lr(&self, lr: f32) {
        self.shared.lr.set(lr);
    }

    /// Per-parameter updates applied so far.
    pub fn updates_applied(&self) -> u64 {
        self.shared.updates.get()
    }

    /// First error raised by a hook since the last call.
    pub fn take_error(&self) -> Result<(), OptimError> {
        match self.shared.error.borrow_mut().take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn state_step(&self, name: &str) -> Option<u64> {
        self.shared.table.borrow().states.get(name).map(|s| s.step)
    }

    pub fn moments_f32(&self, name: &str) -> Option<(Vec<f32>, Vec<f32>)> {
        self.shared.table.borrow().states.get(name).map(|s| s.moments_f32())
    }

    pub fn state_dict(&self) -> OptimizerStateDict {
        self.shared.table.borrow().state_dict()
    }

    pub fn load_state_dict(&self, dict: &OptimizerStateDict) -> Result<(), OptimError> {
        self.shared.table.borrow_mut().load(dict)
    }

    pub fn state_payload_bytes(&self) -> usize {
        self.shared.table.borrow().payload_bytes()
    }
}

impl Drop for InBackwardOptimizer {
    fn drop(&mut self) {
        for p in &self.params {
            p.remove_hook();
        }
    }
}
