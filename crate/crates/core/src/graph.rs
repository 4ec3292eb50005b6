//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] is created per forward pass. Every operation appends a node
//! holding its parents and a closure mapping the output gradient to parent
//! gradients. Graphs are cheap and single-threaded; models are shared
//! immutably across threads and each thread records its own graph.
//!
//! The same graph type doubles as the instrumentation hook: operations
//! report their FLOP cost to a per-scope meter, and named probes can record
//! activation densities. In metering mode the numeric work is skipped and
//! only shapes flow through the network.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients recorded.
    Train,
    /// Running statistics, no gradients.
    Eval,
    /// Running statistics with gradients recorded (used by gradient checks).
    EvalWithGrad,
    /// Shapes and costs only; tensors are zero-filled placeholders.
    Meter,
}

/// FLOP and MAC totals attributed to one scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeCost {
    pub scope: String,
    pub flops: u64,
    pub macs: u64,
}

/// Activation counts recorded by a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub name: String,
    pub active: u64,
    pub total: u64,
}

pub struct Graph {
    mode: Mode,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, ParamId)>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
    scopes: RefCell<Vec<String>>,
    costs: RefCell<Vec<ScopeCost>>,
    probe_threshold: Cell<Option<f64>>,
    probes: RefCell<Vec<ProbeRecord>>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            mode,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            buffer_updates: RefCell::new(Vec::new()),
            scopes: RefCell::new(Vec::new()),
            costs: RefCell::new(Vec::new()),
            probe_threshold: Cell::new(None),
            probes: RefCell::new(Vec::new()),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn records_grad(&self) -> bool {
        matches!(self.mode, Mode::Train | Mode::EvalWithGrad)
    }

    pub fn computes(&self) -> bool {
        self.mode != Mode::Meter
    }

    /// Constant or differentiable input; its gradient is available after backward.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Vec::new(), None)
    }

    /// Leaf for a stored parameter. Gradients are routed back to `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let var = self.push(Arc::clone(store.value(id)), Vec::new(), None);
        if self.records_grad() {
            self.params.borrow_mut().push((var.id, id));
        }
        var
    }

    /// Appends an operation node. `backward` receives the output gradient and
    /// returns one optional gradient per parent, in order.
    pub fn op<'g>(
        &'g self,
        value: Tensor,
        parents: &[&Var<'g>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        if self.records_grad() {
            let ids = parents.iter().map(|p| p.id).collect();
            self.push(Arc::new(value), ids, Some(Box::new(backward)))
        } else {
            self.push(Arc::new(value), Vec::new(), None)
        }
    }

    fn push(&self, value: Arc<Tensor>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Nodes without gradient tracking still get an id so Vars stay uniform.
        nodes.push(Node { parents, backward });
        Var {
            graph: self,
            id,
            value,
        }
    }

    /// Runs reverse accumulation from a scalar (or any-shape, seeded with ones) output.
    pub fn backward(&self, output: &Var<'_>) -> Gradients {
        let seed = Tensor::ones(output.value.raw_dim());
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: &Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        match &mut grads[pid] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(grad);
        }
        let mut by_param: HashMap<ParamId, Tensor> = HashMap::new();
        for &(node, pid) in self.params.borrow().iter() {
            if let Some(g) = &grads[node] {
                match by_param.get_mut(&pid) {
                    Some(acc) => *acc += g,
                    None => {
                        by_param.insert(pid, g.clone());
                    }
                }
            }
        }
        Gradients { nodes: grads, params: by_param }
    }

    pub(crate) fn record_buffer(&self, id: ParamId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by a training-mode forward pass.
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Enters a named scope for cost attribution; the scope ends when the guard drops.
    pub fn scope(&self, name: impl Into<String>) -> ScopeGuard<'_> {
        self.scopes.borrow_mut().push(name.into());
        ScopeGuard { graph: self }
    }

    fn current_scope(&self) -> String {
        self.scopes.borrow().join(".")
    }

    pub(crate) fn add_cost(&self, flops: u64, macs: u64) {
        let scope = self.current_scope();
        let mut costs = self.costs.borrow_mut();
        match costs.last_mut() {
            Some(last) if last.scope == scope => {
                last.flops += flops;
                last.macs += macs;
            }
            _ => costs.push(ScopeCost { scope, flops, macs }),
        }
    }

    /// Costs in execution order; consecutive operations in the same scope are merged.
    pub fn costs(&self) -> Vec<ScopeCost> {
        self.costs.borrow().clone()
    }

    /// Enables density probes. Activations with `|a| > threshold` count as active.
    pub fn enable_probes(&self, threshold: f64) {
        self.probe_threshold.set(Some(threshold));
    }

    pub fn probe(&self, name: &str, var: &Var<'_>) {
        let Some(tau) = self.probe_threshold.get() else { return };
        let active = var.value.iter().filter(|a| a.abs() > tau).count() as u64;
        self.probes.borrow_mut().push(ProbeRecord {
            name: name.to_string(),
            active,
            total: var.value.len() as u64,
        });
    }

    pub fn probes(&self) -> Vec<ProbeRecord> {
        self.probes.borrow().clone()
    }
}

pub struct ScopeGuard<'g> {
    graph: &'g Graph,
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        self.graph.scopes.borrow_mut().pop();
    }
}

/// A value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
    value: Arc<Tensor>,
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.nodes.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
