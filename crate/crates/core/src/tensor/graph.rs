//! Append-only operation tape and reverse sweep.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Maps the upstream gradient of a node to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records forward operations so gradients can be pulled back from a scalar.
///
/// Nodes are appended in evaluation order, so reverse append order is a valid
/// topological order for the backward sweep. A graph built with
/// [`Graph::no_grad`] evaluates the same operations without saving anything
/// for backward.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that gradients are accumulated for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, self.recording)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append an operation result. The closure is dropped unless some parent
    /// needs a gradient.
    pub(crate) fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                parents: parents.iter().map(|p| p.0).collect(),
                backward: Some(Box::new(backward)),
                requires_grad,
            }
        } else {
            Node {
                value,
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        let shapes: Vec<Shape> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0).reshape(loss_shape)?);
        }
        let mut nodes = self.nodes;
        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].clone() else {
                continue;
            };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let parent_grads = backward(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let parents = std::mem::take(&mut node.parents);
            // Saved activations are no longer needed once this node is visited.
            drop(backward);
            for (pid, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), shapes[pid]);
                accumulate(&mut grads[pid], g);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            let mut data = std::mem::replace(acc, Tensor::scalar(0.0)).into_vec();
            for (a, b) in data.iter_mut().zip(g.data()) {
                *a += b;
            }
            *acc = Tensor::from_parts(g.shape(), data);
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}
