//! Operation recording and reverse-mode replay.
//!
//! A [`Tape`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so walking the node list backwards visits
//! operations in reverse topological order.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a recorded operation.
///
/// Given the gradient of the loss with respect to the output, returns one
/// optional gradient per input, in input order. `None` means "no
/// contribution".
pub trait Backward<F: Real> {
    fn backward(
        &self,
        grad: &Tensor<F>,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

struct Node<F: Real> {
    value: Tensor<F>,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<F>>>,
    requires_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients are tracked for.
    pub fn var(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of an operation. The adjoint is dropped when no
    /// input needs a gradient.
    pub fn push<B: Backward<F> + 'static>(&mut self, value: Tensor<F>, inputs: &[Var], op: B) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Replays the tape backwards from a scalar `loss`.
    ///
    /// Gradients of a value used several times accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<F>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = op.backward(&g, &inputs, &node.value)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`]. Only leaf gradients are kept.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
