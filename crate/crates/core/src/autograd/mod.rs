//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each node
//! keeps its forward value and a closure mapping the output gradient to
//! gradients of its inputs. [`Graph::backward`] walks the tape in reverse.
//!
//! Gradients only flow into nodes that require them: leaves created with
//! [`Graph::leaf`] do, constants and [`Var::detach`]ed values do not. A
//! graph built with [`Graph::inference`] records no closures at all.

mod conv;
mod ops;

pub use conv::ConvGeom;
pub use ops::{add_all, concat_last, lift_scatter, mix, LiftMap};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;

const PATTERN_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// Gradient rule of one node: `(grad_out, inputs, output, needs_grad) -> input grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    pattern: Cell<u64>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true, pattern: Cell::new(PATTERN_SEED) }
    }

    /// A graph that never records gradient closures.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false, pattern: Cell::new(PATTERN_SEED) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of the branch every piecewise-linear op (`relu`, `abs`) took so
    /// far. Two evaluations with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern.get()
    }

    pub(crate) fn note_branches(&self, x: &Tensor, branch: impl Fn(f64) -> u64) {
        let mut h = self.pattern.get();
        for &v in x.data() {
            h = (h ^ branch(v)).wrapping_mul(0x100_0000_01b3);
        }
        self.pattern.set(h);
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, self.grad_enabled)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    fn push(&self, value: Rc<Tensor>, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, backward, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Records an operation. `backward` is dropped when no input needs a gradient.
    pub(crate) fn record(&self, value: Tensor, inputs: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(Rc::new(value), parents, backward, requires_grad)
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward() needs a scalar loss");
        if !root.requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad_out) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let input_grads = backward(&grad_out, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(input_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are not kept; only leaves are queried.
            if !node.parents.is_empty() {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, `None` if no path reaches it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        let value = self.value();
        self.graph.push(value, Vec::new(), None, false)
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
