use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Backward rule: receives the output gradient and a mask of which inputs
/// need gradients, returns one optional gradient per input.
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// A tape can be differentiated once; build a new one for the next step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    non_finite: RefCell<Option<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            non_finite: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new(), None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    /// Records an operation with a hand-written backward rule. Used by the
    /// built-in ops and available to callers that need an instrumented or
    /// fused operation of their own.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if !value.all_finite() {
            let mut flag = self.non_finite.borrow_mut();
            if flag.is_none() {
                *flag = Some(format!("op #{} with shape {:?}", self.len(), value.shape()));
            }
        }
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, requires_grad, ids, backward)
    }

    fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        inputs: Vec<NodeId>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs,
            backward,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Errors if any recorded forward value contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.borrow().as_ref() {
            Some(msg) => Err(AutodiffError::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Returns gradients for every node that requires a gradient and is
    /// reachable from `loss`. The tape cannot be differentiated again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::InvalidArgument("loss recorded on another tape".into()));
        }
        if self.consumed.get() {
            return Err(AutodiffError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(AutodiffError::LossNotScalar);
        }
        self.consumed.set(true);

        let mut pending: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        let mut out = HashMap::new();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads: out });
        }
        pending[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else { continue };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let mask: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = rule(&grad, &mask);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for ((&input, g), needed) in node.inputs.iter().zip(input_grads).zip(mask) {
                    let Some(g) = g else { continue };
                    if !needed {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[input].value.shape());
                    match &mut pending[input] {
                        Some(acc) => acc.axpy(1.0, &g),
                        slot => *slot = Some(g),
                    }
                }
            }
            out.insert(id, grad);
        }
        Ok(Gradients { grads: out })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

/// Gradients produced by one backward pass, keyed by node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when it is detached or unreachable.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
