use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// Receives the input values, the output value and the gradient of the loss
/// with respect to the output, and returns one gradient per input. An entry
/// may be `None` when `needs[i]` is false.
pub trait Backward<T: Real>: Send {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

impl<T, F> Backward<T> for F
where
    T: Real,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        self(inputs, output, grad, needs)
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    tracked: bool,
    leaf: bool,
    retain: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction and a single reverse sweep visits every node once.
/// A graph supports exactly one backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    /// Hash of the active pieces chosen by piecewise-linear operations, or
    /// `None` when not tracked.
    pattern: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            pattern: None,
        }
    }

    /// Starts hashing which piece of every piecewise operation (ReLU sign,
    /// max-pool argmax, clamp) is active. Two evaluations with equal
    /// [`Graph::pattern`] lie on the same differentiable piece.
    pub fn track_pattern(&mut self) {
        self.pattern.get_or_insert(0);
    }

    pub fn pattern(&self) -> Option<u64> {
        self.pattern
    }

    /// Folds the active-piece choices of one operation into the pattern.
    pub(crate) fn note_pattern(&mut self, choices: impl IntoIterator<Item = usize>) {
        let Some(acc) = self.pattern.as_mut() else { return };
        for c in choices {
            *acc = (*acc ^ (c as u64 + 1)).wrapping_mul(0x0100_0000_01B3).rotate_left(5);
        }
        *acc = acc.wrapping_add(0x9E37_79B9_7F4A_7C15);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(Node {
            value: tensor,
            parents: Vec::new(),
            rule: None,
            tracked,
            leaf: true,
            retain: false,
        })
    }

    /// Adds a leaf that requires gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Keeps the gradient of an intermediate node after [`Graph::backward`].
    pub fn retain_grad(&mut self, var: Var) {
        self.nodes[var.0].retain = true;
    }

    /// Records the result of an operation. The backward rule is stored only
    /// when some parent is differentiated.
    pub fn record<F>(&mut self, name: &'static str, value: Tensor<T>, parents: &[Var], rule: F) -> Result<Var>
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + 'static,
    {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let rule: Option<Box<dyn Backward<T>>> = if tracked { Some(Box::new(rule)) } else { None };
        Ok(self.push(Node {
            value,
            parents: parents.to_vec(),
            rule,
            tracked,
            leaf: false,
            retain: false,
        }))
    }

    /// Propagates d(loss)/d(node) to every differentiated leaf and retained
    /// node. Leaves that do not influence the loss receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.dims().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor<T>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].tracked).collect();
                let parent_grads = rule.backward(&inputs, &node.value, &grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    if pg.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("backward"));
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += *g),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[i];
            if (node.leaf && node.tracked) || node.retain {
                node.value.set_grad(grad);
            }
        }

        for node in self.nodes.iter_mut().filter(|n| n.leaf && n.tracked) {
            if node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![T::zero(); n]);
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.nodes[var.0].value.grad()
    }

    /// Moves the gradient of `var` out of the graph.
    pub fn take_grad(&mut self, var: Var) -> Option<Vec<T>> {
        self.nodes[var.0].value.take_grad()
    }
}
