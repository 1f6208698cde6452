use super::ops::Op;
use super::params::{ParamId, ParamStore};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a topological order, so
/// the backward pass is a single reverse sweep. A graph belongs to one
/// worker; build separate graphs to run forward passes in parallel.
pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
    param_vars: Vec<(ParamId, Var)>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients (evaluation and decoding).
    pub fn no_grad() -> Self {
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

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the graph. Repeated requests for the
    /// same parameter return the same node, so gradients from every use
    /// accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, op: Op<S>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Fills the gradient of every node
    /// that requires one. A second call needs [`Graph::reset_grads`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, S::one())
    }

    pub fn backward_seeded(&mut self, loss: Var, seed: S) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this graph; reset gradients first".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![seed]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.backprop_node(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Gradients of every parameter placed on this graph, in placement order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.param_vars
            .iter()
            .filter_map(|&(id, v)| self.nodes[v.0].grad.as_deref().map(|g| (id, g)))
    }

    pub(crate) fn accumulate(&mut self, v: Var, contrib: Vec<S>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}
