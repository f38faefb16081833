//! Reference-counted tensor nodes and the reverse-mode sweep.
//!
//! Every operation produces a new immutable [`Tensor`]. When at least one
//! input requires a gradient, the result keeps its parents and a closure that
//! maps the upstream gradient onto each parent. Tensors that do not require a
//! gradient drop that bookkeeping immediately, so frozen sub-networks cost
//! nothing beyond their forward pass.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

/// Maps `(output data, upstream gradient)` to one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant tensor; gradients never flow into it.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), false, Vec::new(), None)
    }

    /// Leaf tensor that collects a gradient during [`Tensor::backward`].
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(data, shape.to_vec(), true, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![value], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(vec![1.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    /// Result of an operation. `backward` is discarded when no parent tracks gradients.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::build(data, shape, true, parents, Some(backward))
        } else {
            Self::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new(self.0.data.clone(), &self.0.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse sweep from a scalar. Gradients of every tracked tensor reachable
    /// from `self` are returned; intermediate gradients are released as soon as
    /// they have been propagated, leaf gradients are kept.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() requires a scalar, got {:?}", self.shape());
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }

        // Reachable nodes in decreasing creation order. Parents are always
        // older than their children, and the accumulation order into a node
        // does not change when unrelated branches join the graph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        visited.insert(self.id());
        while let Some(node) = stack.pop() {
            for p in &node.0.parents {
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(node);
        }
        order.sort_unstable_by_key(|n| std::cmp::Reverse(n.id()));

        grads.insert(self.id(), vec![1.0]);
        for node in &order {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let parent_grads = backward(&node.0.data, &g);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by one backward sweep, keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not influence the output.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
