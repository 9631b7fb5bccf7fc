use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A value that was cut out of the gradient graph with [`Tape::detach`].
///
/// Distillation losses take their teacher operand as `Detached`, so the
/// stop-gradient is part of the signature rather than a convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detached(pub(crate) Var);

impl Detached {
    pub fn var(self) -> Var {
        self.0
    }
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    detached: bool,
}

/// Reverse-mode automatic differentiation record.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for backpropagation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    break_detach: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), break_detach: false }
    }

    /// Fault-injection hook: makes [`Tape::detach`] pass gradients through.
    /// Only the gradient-check harness should ever set this.
    pub fn with_broken_detach(mut self, broken: bool) -> Self {
        self.break_detach = broken;
        self
    }

    pub fn detach_is_broken(&self) -> bool {
        self.break_detach
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient (parameters, probe inputs).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, false)
    }

    /// Leaf that never receives a gradient (images, heatmaps, labels).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, detached: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad, detached });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a copy of `x` with no path back to its producers.
    pub fn detach(&mut self, x: Var) -> Detached {
        if self.break_detach {
            return Detached(x);
        }
        let value = self.value(x).clone();
        Detached(self.push_leaf(value, false, true))
    }

    /// True if `x` was produced by a working [`Tape::detach`].
    pub fn is_detached(&self, x: Var) -> bool {
        self.nodes[x.0].detached
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Records an operation. `backward` receives the output gradient, the
    /// parent values and the output value, and returns one optional gradient
    /// per parent.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            detached: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar loss");
        self.backward_with(loss, Tensor::full(self.value(loss).shape(), T::one()))
    }

    /// Backpropagates an arbitrary seed gradient from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(output).shape());
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            // Parents always precede their child on the tape.
            let (earlier, rest) = grads.split_at_mut(idx);
            let Some(grad) = rest[0].as_ref() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(grad, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut earlier[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of any recorded value, or `None` when no path reaches it.
    pub fn get(&self, x: Var) -> Option<&Tensor<T>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a value, materializing zeros when unreachable.
    pub fn get_or_zeros(&self, x: Var, shape: &[usize]) -> Tensor<T> {
        self.get(x).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
