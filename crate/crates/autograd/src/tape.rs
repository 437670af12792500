//! Wengert-list tape recording forward evaluation for reverse-mode gradients.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Context handed to a node's backward closure.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
}

/// Returns one optional gradient per input, in input order.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records operations on [`Var`]s so that gradients can be computed afterwards.
///
/// Node ids are assigned in creation order, which is already a topological order
/// of the computation graph.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(BTreeMap::new()), grad_enabled: true }
    }

    /// A tape that never stores backward closures; for inference.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, inputs: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), requires_grad, inputs, backward });
        Var { tape: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled;
        self.push(value, rg, Vec::new(), None)
    }

    /// A named trainable leaf. Repeated calls with the same name return the same
    /// node, so weights shared between call sites accumulate one gradient.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let var = self.leaf(value.clone());
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records the result of an operation on `inputs`.
    pub(crate) fn op<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)), "vars from another tape");
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.requires_grad_of(v.id));
        if requires_grad {
            self.push(value, true, inputs.iter().map(|v| v.id).collect(), Some(Box::new(backward)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    /// Reverse sweep from `root`, seeding it with ones.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Tensor::ones(root.shape());
        self.backward_with(root, seed)
    }

    /// Reverse sweep from `root`, seeding it with `seed` (same shape as root).
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "backward seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "gradient shape mismatch");
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads, params: self.params.borrow().clone() }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter registered through [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// All parameter gradients, keyed and ordered by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, &id)| self.grads.get(id).and_then(|g| g.as_ref()).map(|g| (name.as_str(), g)))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Cuts the graph: same value, no gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }
}
