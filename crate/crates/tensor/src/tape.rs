//! Reverse-mode differentiation record.
//!
//! Every op pushes its forward value together with a [`Backward`] rule onto a
//! [`Tape`]. Nodes are appended in evaluation order, so the node list is
//! already a topological order and the backward pass is a single reverse
//! sweep.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Given the op's inputs, its output and the gradient flowing into the
    /// output, returns one gradient per input. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that records values only. Nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param,
            requires_grad: requires_grad && self.grad_enabled,
        });
        id
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// A free leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Records a trainable parameter. Repeated calls for the same id on one
    /// tape return the same node, so its gradient accumulates naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true, Some(id));
        self.params.insert(id, v);
        v
    }

    /// Copies `v`'s value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an op. The backward rule is dropped when no input
    /// needs a gradient.
    pub fn push<B: Backward + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let id = Var(self.nodes.len());
        debug_assert!(inputs.iter().all(|i| i.0 < id.0));
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            param: None,
            requires_grad,
        });
        id
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        let mut leaf_grads: HashMap<Var, Tensor> = HashMap::new();
        let mut param_grads: HashMap<ParamId, Tensor> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else {
                if let Some(pid) = node.param {
                    param_grads.insert(pid, grad.clone());
                }
                leaf_grads.insert(Var(idx), grad);
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad)?;
            if input_grads.len() != node.inputs.len() {
                return Err(TensorError::Internal(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if input.0 >= idx {
                    return Err(TensorError::Internal(format!(
                        "{} at node {idx} consumes later node {}",
                        op.name(),
                        input.0
                    )));
                }
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(TensorError::Internal(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[input.0].value.shape()
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            leaves: leaf_grads,
            params: param_grads,
        })
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}
