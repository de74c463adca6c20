use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the gradient of a node's output to gradients of its parents.
///
/// The flag slice says which parents require a gradient; entries for the
/// others may be `None` and are ignored.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Tape of a single forward computation.
///
/// A graph is built once per optimization step (or inference call) and
/// dropped afterwards. Leaves created with [`Graph::param`] receive gradients;
/// everything created with [`Graph::constant`] is treated as data.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    mult_adds: Cell<u64>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), mult_adds: Cell::new(0) }
    }

    /// Data leaf: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push<'g>(&'g self, value: Tensor, parents: &[Var<'g>], backward: BackwardFn) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let node = Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        };
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add operations performed by convolutions and matrix products
    /// recorded on this graph so far.
    pub fn mult_adds(&self) -> u64 {
        self.mult_adds.get()
    }

    pub(crate) fn count_mult_adds(&self, n: u64) {
        self.mult_adds.set(self.mult_adds.get() + n);
    }

    /// Reverse-mode sweep from `root`, seeded with ones of `root`'s shape.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        if !nodes[root.id].requires_grad {
            return Grads { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].as_ref() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape mismatch");
                match grads[pid].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[pid] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, no gradient flow (stop-gradient).
    pub fn detach(&self) -> Var<'g> {
        let value = (*self.value()).clone();
        self.graph.constant(value)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
