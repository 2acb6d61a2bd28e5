use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::checkpoint::{self, CheckpointRecord};
use super::meter::{self, Category, Phase};
use super::param::Parameter;
use super::tensor::{Buffer, NodeRef, Tensor};
use super::TensorError;

/// Vector-Jacobian product of a recorded op: `(grad_out, needs_grad) -> grad per input`.
pub type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

pub(crate) enum NodeKind {
    Leaf,
    Param(Parameter),
    Op { name: &'static str, backward: BackwardFn },
    Checkpoint(CheckpointRecord),
    Released,
}

pub(crate) struct Node {
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    kind: NodeKind,
}

#[derive(Default)]
struct TapeState {
    nodes: Vec<Node>,
    param_leaves: HashMap<u64, usize>,
    used_params: Vec<Parameter>,
    used_ids: HashSet<u64>,
    leaf_grads: HashMap<usize, Tensor>,
    backward_done: bool,
    generation: u64,
}

struct TapeInner {
    recording: bool,
    state: RefCell<TapeState>,
}

/// Append-only record of differentiable operations.
///
/// Ops record onto the tape that owns any of their inputs. A tape built with
/// [`Tape::no_grad`] never records; parameters read through it are plain
/// constants.
#[derive(Clone)]
pub struct Tape(Rc<TapeInner>);

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(TapeInner { recording: true, state: RefCell::new(TapeState::default()) }))
    }

    pub fn no_grad() -> Self {
        Tape(Rc::new(TapeInner { recording: false, state: RefCell::new(TapeState::default()) }))
    }

    pub fn is_recording(&self) -> bool {
        self.0.recording
    }

    pub fn len(&self) -> usize {
        self.0.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef { tape: self.clone(), id, generation: self.0.state.borrow().generation }
    }

    pub(crate) fn check_ref(&self, op: &'static str, node: &NodeRef) -> Result<(), TensorError> {
        if !self.same(&node.tape) {
            return Err(TensorError::MixedTapes { op });
        }
        if node.generation != self.0.state.borrow().generation {
            return Err(TensorError::StaleNode { op });
        }
        Ok(())
    }

    fn push(&self, node: Node) -> usize {
        let mut state = self.0.state.borrow_mut();
        state.nodes.push(node);
        state.nodes.len() - 1
    }

    /// Marks `t` as a differentiable input; its gradient is readable with
    /// [`Tape::grad`] after backward.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.is_recording() {
            return t.detach();
        }
        let id = self.push(Node { inputs: Vec::new(), shape: t.shape().to_vec(), kind: NodeKind::Leaf });
        Tensor::from_parts(t.shape().to_vec(), t.buffer().clone(), Some(self.node_ref(id)))
    }

    pub(crate) fn param_var(&self, p: &Parameter) -> Tensor {
        {
            let mut state = self.0.state.borrow_mut();
            if state.used_ids.insert(p.id()) {
                state.used_params.push(p.clone());
            }
        }
        if !self.is_recording() || !p.requires_grad() {
            return p.value();
        }
        let id = self.param_leaf_id(p);
        let value = p.value();
        Tensor::from_parts(value.shape().to_vec(), value.buffer().clone(), Some(self.node_ref(id)))
    }

    pub(crate) fn param_leaf_id(&self, p: &Parameter) -> usize {
        if let Some(&id) = self.0.state.borrow().param_leaves.get(&p.id()) {
            return id;
        }
        let id = self.push(Node { inputs: Vec::new(), shape: p.shape(), kind: NodeKind::Param(p.clone()) });
        self.0.state.borrow_mut().param_leaves.insert(p.id(), id);
        id
    }

    /// Names of the recorded ops, in recording order. Leaves are omitted.
    pub fn op_names(&self) -> Vec<&'static str> {
        let state = self.0.state.borrow();
        state
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Op { name, .. } => Some(name),
                NodeKind::Checkpoint(_) => Some("checkpoint"),
                _ => None,
            })
            .collect()
    }

    /// Parameters read through this tape, in first-use order.
    pub fn used_parameters(&self) -> Vec<Parameter> {
        self.0.state.borrow().used_params.clone()
    }

    /// Records an op whose output payload is `data`. `make_backward` receives
    /// the output buffer so rules can reuse forward results.
    pub(crate) fn record(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: &[&Tensor],
        make_backward: impl FnOnce(&Rc<Buffer>) -> BackwardFn,
    ) -> Result<Tensor, TensorError> {
        let owner = owner_of(op, inputs)?;
        let buffer = Rc::new(Buffer::new(data, meter::current_category()));
        Tape::record_buffer(op, shape, buffer, inputs, owner, make_backward)
    }

    /// Like [`Tape::record`] but the output shares an existing payload.
    pub(crate) fn record_shared(
        op: &'static str,
        shape: Vec<usize>,
        buffer: Rc<Buffer>,
        inputs: &[&Tensor],
        make_backward: impl FnOnce(&Rc<Buffer>) -> BackwardFn,
    ) -> Result<Tensor, TensorError> {
        let owner = owner_of(op, inputs)?;
        Tape::record_buffer(op, shape, buffer, inputs, owner, make_backward)
    }

    fn record_buffer(
        op: &'static str,
        shape: Vec<usize>,
        buffer: Rc<Buffer>,
        inputs: &[&Tensor],
        owner: Option<&NodeRef>,
        make_backward: impl FnOnce(&Rc<Buffer>) -> BackwardFn,
    ) -> Result<Tensor, TensorError> {
        let Some(owner) = owner else {
            return Ok(Tensor::from_parts(shape, buffer, None));
        };
        let tape = owner.tape.clone();
        for t in inputs {
            if let Some(n) = t.node() {
                tape.check_ref(op, n)?;
            }
        }
        if !tape.is_recording() {
            return Ok(Tensor::from_parts(shape, buffer, None));
        }
        let ids = inputs.iter().map(|t| t.node().map(|n| n.id)).collect();
        let backward = make_backward(&buffer);
        let id = tape.push(Node { inputs: ids, shape: shape.clone(), kind: NodeKind::Op { name: op, backward } });
        let node = tape.node_ref(id);
        Ok(Tensor::from_parts(shape, buffer, Some(node)))
    }

    pub(crate) fn record_checkpoint(
        &self,
        output: &Tensor,
        input_ids: Vec<Option<usize>>,
        record: CheckpointRecord,
    ) -> Tensor {
        let id =
            self.push(Node { inputs: input_ids, shape: output.shape().to_vec(), kind: NodeKind::Checkpoint(record) });
        Tensor::from_parts(output.shape().to_vec(), output.buffer().clone(), Some(self.node_ref(id)))
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated into [`Parameter::grad`] the moment
    /// the last consumer of the parameter has been differentiated, and the
    /// parameter's post-accumulate hook fires right after. Intermediate
    /// gradients and saved forward values are released as the sweep passes
    /// each node.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let node = loss.node().ok_or(TensorError::NotOnTape)?;
        self.check_ref("backward", node)?;
        if self.0.state.borrow().backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let _phase = meter::phase_scope(Phase::Backward);
        let seed = Tensor::full(loss.shape(), 1.0);
        let leaf_grads = self.backward_from(loss, seed, &mut FinalizeSink)?;
        let mut state = self.0.state.borrow_mut();
        state.backward_done = true;
        state.leaf_grads = leaf_grads;
        Ok(())
    }

    /// Gradient of a tensor created by [`Tape::leaf`] after backward.
    pub fn grad(&self, leaf: &Tensor) -> Option<Tensor> {
        let node = leaf.node()?;
        if !node.tape.same(self) {
            return None;
        }
        self.0.state.borrow().leaf_grads.get(&node.id).map(Tensor::detach)
    }

    /// Clears all nodes so the tape can record a new graph. Tensors recorded
    /// before the reset can no longer be used as differentiable inputs.
    pub fn reset(&self) {
        let mut state = self.0.state.borrow_mut();
        let generation = state.generation + 1;
        *state = TapeState { generation, ..TapeState::default() };
    }

    pub(crate) fn backward_from(
        &self,
        root: &Tensor,
        seed: Tensor,
        sink: &mut dyn ParamSink,
    ) -> Result<HashMap<usize, Tensor>, TensorError> {
        let root_id = root.node().ok_or(TensorError::NotOnTape)?.id;
        let mut nodes = std::mem::take(&mut self.0.state.borrow_mut().nodes);
        let result = {
            let mut engine = Engine::new(&mut nodes, root_id, seed, sink);
            engine.run(root_id).map(|_| engine.leaf_grads())
        };
        self.0.state.borrow_mut().nodes = nodes;
        result
    }
}

/// Receives finalized parameter gradients from the backward sweep.
pub(crate) trait ParamSink {
    fn deliver(&mut self, param: &Parameter, grad: Tensor) -> Result<(), TensorError>;
}

struct FinalizeSink;

impl ParamSink for FinalizeSink {
    fn deliver(&mut self, param: &Parameter, grad: Tensor) -> Result<(), TensorError> {
        param.accumulate_final(grad);
        Ok(())
    }
}

pub(crate) struct Engine<'a> {
    nodes: &'a mut Vec<Node>,
    grads: Vec<Option<Tensor>>,
    remaining: Vec<usize>,
    sink: &'a mut dyn ParamSink,
}

impl<'a> Engine<'a> {
    fn new(nodes: &'a mut Vec<Node>, root: usize, seed: Tensor, sink: &'a mut dyn ParamSink) -> Self {
        let mut remaining = vec![0usize; nodes.len()];
        for node in &nodes[..=root] {
            for &j in node.inputs.iter().flatten() {
                remaining[j] += 1;
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);
        Engine { nodes, grads, remaining, sink }
    }

    fn run(&mut self, root: usize) -> Result<(), TensorError> {
        for i in (0..=root).rev() {
            let kind = std::mem::replace(&mut self.nodes[i].kind, NodeKind::Released);
            match kind {
                NodeKind::Leaf => self.nodes[i].kind = NodeKind::Leaf,
                NodeKind::Param(p) => {
                    // Reached only when the parameter had no pending consumer
                    // (e.g. the loss is the parameter itself).
                    if let Some(g) = self.grads[i].take() {
                        self.sink.deliver(&p, g)?;
                    }
                    self.nodes[i].kind = NodeKind::Param(p);
                }
                NodeKind::Op { backward, .. } => {
                    let inputs = self.nodes[i].inputs.clone();
                    if let Some(g) = self.grads[i].take() {
                        let needs: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                        let mut outs = backward(g.data(), &needs);
                        drop(g);
                        drop(backward);
                        for (k, input) in inputs.iter().enumerate() {
                            let Some(j) = *input else { continue };
                            if let Some(v) = outs.get_mut(k).and_then(Option::take) {
                                self.contribute_vec(j, v);
                            }
                            self.consumer_done(j)?;
                        }
                    } else {
                        for j in inputs.into_iter().flatten() {
                            self.consumer_done(j)?;
                        }
                    }
                }
                NodeKind::Checkpoint(record) => {
                    let inputs = self.nodes[i].inputs.clone();
                    match self.grads[i].take() {
                        Some(g) => self.checkpoint_backward(&inputs, record, g)?,
                        None => {
                            for j in inputs.into_iter().flatten() {
                                self.consumer_done(j)?;
                            }
                        }
                    }
                }
                NodeKind::Released => {}
            }
        }
        Ok(())
    }

    fn category_of(&self, j: usize) -> Category {
        match self.nodes[j].kind {
            NodeKind::Param(_) => Category::Gradient,
            _ => Category::Activation,
        }
    }

    fn contribute_vec(&mut self, j: usize, v: Vec<f32>) {
        if let Some(acc) = &mut self.grads[j] {
            add_into(acc, &v);
        } else {
            let buffer = Rc::new(Buffer::new(v, self.category_of(j)));
            self.grads[j] = Some(Tensor::from_parts(self.nodes[j].shape.clone(), buffer, None));
        }
    }

    fn contribute_tensor(&mut self, j: usize, t: Tensor) {
        if self.grads[j].is_none() && t.category() == self.category_of(j) {
            self.grads[j] = Some(t.detach());
        } else {
            self.contribute_vec(j, t.to_vec());
        }
    }

    fn consumer_done(&mut self, j: usize) -> Result<(), TensorError> {
        self.remaining[j] -= 1;
        if self.remaining[j] == 0 {
            if let NodeKind::Param(p) = &self.nodes[j].kind {
                if let Some(g) = self.grads[j].take() {
                    let p = p.clone();
                    self.sink.deliver(&p, g)?;
                }
            }
        }
        Ok(())
    }

    fn leaf_grads(&mut self) -> HashMap<usize, Tensor> {
        let mut out = HashMap::new();
        for (j, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Leaf) {
                if let Some(g) = self.grads[j].take() {
                    out.insert(j, g);
                }
            }
        }
        out
    }

    fn checkpoint_backward(
        &mut self,
        inputs: &[Option<usize>],
        record: CheckpointRecord,
        grad_out: Tensor,
    ) -> Result<(), TensorError> {
        let n_act = record.inputs.len();
        let inner = Tape::new();
        let inner_inputs: Vec<Tensor> = record
            .inputs
            .iter()
            .zip(&inputs[..n_act])
            .map(|(t, id)| if id.is_some() { inner.leaf(t) } else { t.detach() })
            .collect();
        let out = checkpoint::replay(&record, &inner, &inner_inputs)?;
        if out.shape() != grad_out.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "checkpoint",
                lhs: out.shape().to_vec(),
                rhs: grad_out.shape().to_vec(),
            });
        }

        let mut param_nodes = HashMap::new();
        for &j in inputs[n_act..].iter().flatten() {
            if let NodeKind::Param(p) = &self.nodes[j].kind {
                param_nodes.insert(p.id(), j);
            }
        }
        let mut delivered = HashSet::new();
        let leaf_grads = if out.requires_grad() {
            let mut forward = ForwardSink { outer: self, param_nodes: &param_nodes, delivered: &mut delivered };
            inner.backward_from(&out, grad_out, &mut forward)?
        } else {
            HashMap::new()
        };

        for (k, t) in inner_inputs.iter().enumerate() {
            let Some(j) = inputs[k] else { continue };
            if let Some(g) = t.node_id().and_then(|id| leaf_grads.get(&id)) {
                self.contribute_tensor(j, g.clone());
            }
            self.consumer_done(j)?;
        }
        for &j in inputs[n_act..].iter().flatten() {
            if !delivered.contains(&j) {
                self.consumer_done(j)?;
            }
        }
        Ok(())
    }
}

/// Routes parameter gradients from a replayed segment into the outer sweep.
struct ForwardSink<'e, 'a> {
    outer: &'e mut Engine<'a>,
    param_nodes: &'e HashMap<u64, usize>,
    delivered: &'e mut HashSet<usize>,
}

impl ParamSink for ForwardSink<'_, '_> {
    fn deliver(&mut self, param: &Parameter, grad: Tensor) -> Result<(), TensorError> {
        match self.param_nodes.get(&param.id()) {
            Some(&j) => {
                self.outer.contribute_tensor(j, grad);
                self.delivered.insert(j);
                self.outer.consumer_done(j)
            }
            None => Err(TensorError::Invalid {
                op: "checkpoint",
                reason: format!("replay touched parameter {} not seen during forward", param.name()),
            }),
        }
    }
}

fn owner_of<'t>(op: &'static str, inputs: &[&'t Tensor]) -> Result<Option<&'t NodeRef>, TensorError> {
    let mut owner: Option<&NodeRef> = None;
    for t in inputs {
        if let Some(n) = t.node() {
            match owner {
                None => owner = Some(n),
                Some(o) if !o.tape.same(&n.tape) => return Err(TensorError::MixedTapes { op }),
                Some(_) => {}
            }
        }
    }
    Ok(owner)
}

fn add_into(acc: &mut Tensor, v: &[f32]) {
    for (a, b) in acc.buffer_mut().data_mut().iter_mut().zip(v) {
        *a += *b;
    }
}
