use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::meter::Category;
use super::tape::Tape;
use super::tensor::Tensor;
use super::TensorError;

/// Callback fired once per backward pass after a parameter's gradient is final.
pub type GradHook = Box<dyn FnMut(&Parameter)>;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CREATED_ON_THREAD: Cell<u64> = const { Cell::new(0) };
}

/// Parameters constructed on this thread so far. Used to reject checkpoint
/// replays that allocate parameters.
pub(crate) fn parameters_created() -> u64 {
    CREATED_ON_THREAD.with(Cell::get)
}

struct ParamCell {
    id: u64,
    name: String,
    requires_grad: Cell<bool>,
    value: RefCell<Tensor>,
    grad: RefCell<Option<Tensor>>,
    hook: RefCell<Option<GradHook>>,
    hook_in_flight: Cell<bool>,
    version: Cell<u64>,
}

/// Named trainable tensor. Clones are handles to the same parameter.
#[derive(Clone)]
pub struct Parameter(Rc<ParamCell>);

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let value = Tensor::with_category(shape, data, Category::Parameter)?;
        CREATED_ON_THREAD.with(|c| c.set(c.get() + 1));
        Ok(Parameter(Rc::new(ParamCell {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            requires_grad: Cell::new(true),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            hook: RefCell::new(None),
            hook_in_flight: Cell::new(false),
            version: Cell::new(0),
        })))
    }

    pub fn frozen(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let p = Parameter::new(name, shape, data)?;
        p.set_requires_grad(false);
        Ok(p)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f32>()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.0.requires_grad.set(flag);
    }

    /// Detached view of the current value.
    pub fn value(&self) -> Tensor {
        self.0.value.borrow().detach()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.value.borrow().to_vec()
    }

    /// Incremented by every in-place update.
    pub fn version(&self) -> u64 {
        self.0.version.get()
    }

    /// Tensor to use in a forward pass on `tape`. Trainable parameters become
    /// a single leaf node per tape; frozen ones (or a non-recording tape) give
    /// a constant sharing the payload.
    pub fn var(&self, tape: &Tape) -> Tensor {
        tape.param_var(self)
    }

    /// Mutates the value in place. Copies the payload first if it is shared.
    pub fn update(&self, f: impl FnOnce(&mut [f32])) {
        let mut value = self.0.value.borrow_mut();
        f(value.buffer_mut().data_mut());
        self.0.version.set(self.0.version.get() + 1);
    }

    /// Replaces the value; shape must match.
    pub fn set_value(&self, data: &[f32]) -> Result<(), TensorError> {
        let shape = self.shape();
        if data.len() != self.numel() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        self.update(|v| v.copy_from_slice(data));
        Ok(())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().as_ref().map(Tensor::detach)
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn take_grad(&self) -> Option<Tensor> {
        self.0.grad.borrow_mut().take()
    }

    pub fn set_grad(&self, grad: Option<Tensor>) -> Result<(), TensorError> {
        if let Some(g) = &grad {
            if g.shape() != self.shape().as_slice() {
                return Err(TensorError::ShapeMismatch { op: "set_grad", lhs: self.shape(), rhs: g.shape().to_vec() });
            }
        }
        *self.0.grad.borrow_mut() = grad;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    /// Mutates the stored gradient in place, if any.
    pub fn update_grad(&self, f: impl FnOnce(&mut [f32])) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            f(g.buffer_mut().data_mut());
        }
    }

    pub fn register_post_accumulate_grad_hook(
        &self,
        hook: impl FnMut(&Parameter) + 'static,
    ) -> Result<(), TensorError> {
        let mut slot = self.0.hook.borrow_mut();
        if slot.is_some() || self.0.hook_in_flight.get() {
            return Err(TensorError::HookAlreadyRegistered { name: self.0.name.clone() });
        }
        *slot = Some(Box::new(hook));
        Ok(())
    }

    pub fn has_hook(&self) -> bool {
        self.0.hook.borrow().is_some() || self.0.hook_in_flight.get()
    }

    pub fn remove_hook(&self) -> Option<GradHook> {
        self.0.hook.borrow_mut().take()
    }

    /// Adds a finalized gradient contribution into `grad` and fires the hook.
    pub(crate) fn accumulate_final(&self, contribution: Tensor) {
        {
            let mut grad = self.0.grad.borrow_mut();
            match grad.as_mut() {
                None => *grad = Some(contribution.detach()),
                Some(existing) => {
                    let buf = existing.buffer_mut().data_mut();
                    for (g, c) in buf.iter_mut().zip(contribution.data()) {
                        *g += *c;
                    }
                }
            }
        }
        self.fire_hook();
    }

    fn fire_hook(&self) {
        let hook = self.0.hook.borrow_mut().take();
        if let Some(mut hook) = hook {
            self.0.hook_in_flight.set(true);
            hook(self);
            self.0.hook_in_flight.set(false);
            *self.0.hook.borrow_mut() = Some(hook);
        }
    }

    pub fn ptr_eq(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.0.name)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
