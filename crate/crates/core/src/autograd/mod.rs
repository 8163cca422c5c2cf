//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every op computes its forward value eagerly and, when the graph records
//! gradients, keeps a boxed [`Op`] holding whatever it needs to run its
//! backward rule. Gradients are accumulated in reverse tape order, so shared
//! nodes always sum their contributions in the same order.

mod basic;
mod gradcheck;

pub use gradcheck::{check_gradient, finite_diff_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values an op's backward rule may read.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor4<T>],
    pub output: &'a Tensor4<T>,
    /// Whether each input needs a gradient at all.
    pub needs: &'a [bool],
}

/// A differentiable operation recorded on the tape.
pub trait Op<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input. Inputs whose `needs` flag is
    /// false may be given `None`.
    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let _ = (ctx, grad_out);
        Err(Error::UnsupportedOp(self.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Leaf,
    Constant,
    Op,
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<T>>>,
    kind: Kind,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph for inference: ops run but nothing is saved for backward.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push_node(value, Vec::new(), None, Kind::Leaf, self.record)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push_node(value, Vec::new(), None, Kind::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. Third-party ops (e.g. the toy trainer's 3×3
    /// convolution) use this directly.
    pub fn push_op(&mut self, value: Tensor4<T>, inputs: &[Var], op: Box<dyn Op<T>>) -> Var {
        let requires = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires { Some(op) } else { None };
        self.push_node(value, inputs.to_vec(), op, Kind::Op, requires)
    }

    /// Convenience wrapper around [`Graph::push_op`] that only builds the op
    /// when it will be kept.
    pub(crate) fn record_with<O: Op<T> + 'static>(
        &mut self,
        value: Tensor4<T>,
        inputs: &[Var],
        op: impl FnOnce() -> O,
    ) -> Var {
        let requires = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Op<T>>> = if requires { Some(Box::new(op())) } else { None };
        self.push_node(value, inputs.to_vec(), op, Kind::Op, requires)
    }

    fn push_node(
        &mut self,
        value: Tensor4<T>,
        inputs: Vec<Var>,
        op: Option<Box<dyn Op<T>>>,
        kind: Kind,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            kind,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape();
        if shape.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor4::ones(shape));
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.kind != Kind::Op {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let op = node
                .op
                .as_ref()
                .ok_or_else(|| Error::contract("graph was built without gradient recording"))?;
            let inputs: Vec<&Tensor4<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let in_grads = op.backward(&ctx, &grad_out)?;
            if in_grads.len() != node.inputs.len() {
                return Err(Error::contract(format!(
                    "op `{}` returned {} gradients for {} inputs",
                    op.name(),
                    in_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((input, g), need) in node.inputs.iter().zip(in_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                let target = &self.nodes[input.0].value;
                if g.shape() != target.shape() {
                    return Err(Error::dim(op.name(), g.shape(), target.shape()));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
            // The node's own gradient is no longer needed unless it is a leaf.
            grads[idx] = None;
        }

        let mut leaves = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.kind == Kind::Leaf {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor4::zeros(node.value.shape()));
                leaves.push((Var(idx), g));
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradient of the loss for every leaf of the graph; leaves the loss does not
/// depend on hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Tensor4<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.leaves
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.leaves[i].1)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor4<T>> {
        self.get(v)
            .ok_or_else(|| Error::contract(format!("node {} is not a leaf", v.0)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor4<T>)> {
        self.leaves.iter().map(|(v, g)| (*v, g))
    }
}
