use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{Element, Result, Tensor, TensorError};

/// Vector-Jacobian rule of a recorded node.
///
/// Called with the upstream gradient (shaped like the output), the input
/// values and the output value; returns one gradient per input, `None` when
/// an input receives no gradient.
pub type VjpFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    vjp: Option<VjpFn<T>>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, usize>,
    frozen: HashSet<usize>,
    grads: Vec<Option<Tensor<T>>>,
}

/// Tape of primitive applications. Nodes are appended in evaluation order,
/// which is a topological order; `backward` visits them in reverse.
///
/// A graph lives for one forward/backward pass and is confined to one thread.
pub struct Graph<T> {
    inner: RefCell<Inner<T>>,
    inference: bool,
    retain_all: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                frozen: HashSet::new(),
                grads: Vec::new(),
            }),
            inference: false,
            retain_all: Cell::new(false),
        }
    }

    /// A graph in which [`Graph::param`] yields constants, so forward passes
    /// record no backward rules for parameters.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::new()
        }
    }

    /// Keep gradients of intermediate nodes after `backward`, not only leaves.
    pub fn retain_all_grads(&self) {
        self.retain_all.set(true);
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), false, None)
    }

    /// Fresh differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), true, None)
    }

    /// Leaf bound to a parameter tensor. Repeated calls with the same tensor
    /// (same buffer) return the same node, so shared weights accumulate.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let key = value.storage_id();
        if let Some(&id) = self.inner.borrow().params.get(&key) {
            return Var { graph: self, id };
        }
        let trainable = !self.inference && !self.inner.borrow().frozen.contains(&key);
        let var = self.push(value.clone(), Vec::new(), trainable, None);
        self.inner.borrow_mut().params.insert(key, var.id);
        var
    }

    /// Marks a parameter tensor as non-trainable for this graph. Must be called
    /// before the parameter is first bound with [`Graph::param`].
    pub fn freeze(&self, value: &Tensor<T>) {
        self.inner.borrow_mut().frozen.insert(value.storage_id());
    }

    /// Records a primitive application. The rule is kept only when some input
    /// requires a gradient.
    pub fn record(&self, inputs: &[Var<'_, T>], value: Tensor<T>, vjp: VjpFn<T>) -> Var<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(value, ids, true, Some(vjp))
        } else {
            self.push(value, Vec::new(), false, None)
        }
    }

    fn push(
        &self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        requires_grad: bool,
        vjp: Option<VjpFn<T>>,
    ) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            inputs,
            requires_grad,
            vjp,
        });
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. Gradients of leaves (and of every
    /// node, if [`Graph::retain_all_grads`] was called) are stored on the graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let inner = self.inner.borrow();
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let retain_all = self.retain_all.get();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inner.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.id] = Some(Tensor::ones(loss_node.value.shape().to_vec()));
        }
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            let Some(vjp) = node.vjp.as_ref() else {
                continue;
            };
            let Some(upstream) = (if retain_all {
                grads[id].clone()
            } else {
                grads[id].take()
            }) else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
            let input_grads = vjp(&upstream, &inputs, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.shape(), inner.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *g;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        // Leaves that require grad but were unreachable get explicit zeros.
        for (id, node) in inner.nodes.iter().enumerate() {
            if node.requires_grad && node.vjp.is_none() && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        drop(inner);
        self.inner.borrow_mut().grads = grads;
        Ok(())
    }

    /// Gradient of a node after [`Graph::backward`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.inner.borrow().grads.get(var.id).cloned().flatten()
    }

    /// Gradient of a parameter bound with [`Graph::param`].
    pub fn param_grad(&self, value: &Tensor<T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let id = *inner.params.get(&value.storage_id())?;
        inner.grads.get(id).cloned().flatten()
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn value(&self) -> Tensor<T> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub(crate) fn same_graph(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.graph, other.graph)
    }
}
