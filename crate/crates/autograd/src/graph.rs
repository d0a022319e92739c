use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes input gradients from the output gradient.
///
/// Arguments: output gradient, input values, output value, and which inputs
/// need a gradient. Returned vector is aligned with the inputs.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    Constant,
    Leaf,
    Op,
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    kind: NodeKind,
}

/// Element counts held by a graph. Used by the memory profiler as the
/// "measured" side of the analytic activation model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Elements of op outputs (activations).
    pub activation_elements: usize,
    /// Elements of leaves and constants (parameters and inputs).
    pub leaf_elements: usize,
    /// Elements saved by ops for their backward pass (attention probabilities).
    pub saved_elements: usize,
    pub op_count: usize,
}

impl GraphStats {
    pub fn total_bytes(&self) -> usize {
        (self.activation_elements + self.leaf_elements + self.saved_elements)
            * std::mem::size_of::<f64>()
    }
}

/// Tape of tensor operations supporting reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stats: GraphStats,
    peak_live_bytes: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input (parameters, attribution targets).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.stats.leaf_elements += value.numel();
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            kind: if requires_grad {
                NodeKind::Leaf
            } else {
                NodeKind::Constant
            },
        });
        self.touch_peak();
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.stats.activation_elements += value.numel();
        self.stats.op_count += 1;
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            kind: NodeKind::Op,
        });
        self.touch_peak();
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn note_saved(&mut self, elements: usize) {
        self.stats.saved_elements += elements;
        self.touch_peak();
    }

    fn touch_peak(&mut self) {
        self.peak_live_bytes = self.peak_live_bytes.max(self.stats.total_bytes());
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    /// Largest number of bytes held by the tape at any point so far.
    pub fn peak_bytes(&self) -> usize {
        self.peak_live_bytes
    }

    /// Activation elements recorded since `mark` (a node index obtained from
    /// [`Graph::len`]).
    pub fn activation_elements_since(&self, mark: usize) -> usize {
        self.nodes[mark..]
            .iter()
            .filter(|n| n.kind == NodeKind::Op)
            .map(|n| n.value.numel())
            .sum()
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Tensor::ones(self.value(output).shape());
        assert_eq!(seed.numel(), 1, "backward() needs a scalar output");
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &inputs, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
