//! A small reverse-mode automatic differentiation engine.
//!
//! Every value is a dense `NCHW` array of `f64`. Vectors and scalars are
//! represented with singleton trailing axes, e.g. per-channel statistics are
//! `(B, C, 1, 1)` and a scalar loss is `(1, 1, 1, 1)`.
//!
//! A [`Tape`] records an operation only when at least one of its inputs
//! requires a gradient. Values that nothing differentiates through are plain
//! constants and are freed as soon as the caller drops them, so inference
//! passes run without retaining intermediate activations.

mod conv;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::Array4;

pub use conv::Conv2dSpec;

/// Dense `NCHW` array.
pub type Array = Array4<f64>;

type BackwardFn = Box<dyn Fn(&Array, &[bool]) -> Vec<Option<Array>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Handle to a value, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Array>,
    node: Option<usize>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Array) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.value.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// The single element of a `(1, 1, 1, 1)` value.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "scalar() on shape {:?}", self.shape());
        self.value[[0, 0, 0, 0]]
    }

    pub(crate) fn rc(&self) -> Rc<Array> {
        Rc::clone(&self.value)
    }
}

/// Records differentiable operations for a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that accumulates a gradient.
    pub fn leaf(&self, value: Array) -> Var {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value: Rc::new(value),
            node: Some(id),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wraps the result of an operation. `backward` receives the output
    /// gradient and a mask of which inputs need one, and returns one entry
    /// per input.
    pub(crate) fn record<F>(&self, value: Array, inputs: &[&Var], backward: F) -> Var
    where
        F: Fn(&Array, &[bool]) -> Vec<Option<Array>> + 'static,
    {
        if inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(value);
        }
        let id = self.push(Node {
            parents: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            node: Some(id),
        }
    }

    /// Back-propagates from `root`, seeding it with a gradient of ones.
    pub fn backward(&self, root: &Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.node else {
            return Gradients { grads };
        };
        grads[root_id] = Some(Array::ones(root.value.raw_dim()));

        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            // Interior gradients are consumed; only leaves keep theirs.
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(g)) = (parent, g) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Array> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }
}

/// Sums `grad` down to `shape`, undoing broadcasting along singleton axes.
pub(crate) fn sum_to_shape(grad: Array, shape: &[usize]) -> Array {
    let mut g = grad;
    for (axis, &target) in shape.iter().enumerate() {
        if target == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(ndarray::Axis(axis)).insert_axis(ndarray::Axis(axis));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = Var::constant(Array::ones((1, 1, 2, 2)));
        let b = tape.mul(&a, &a);
        assert!(!b.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn leaf_gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_elem((1, 1, 1, 3), 2.0));
        // y = sum(x * x + x) => dy/dx = 2x + 1 = 5
        let sq = tape.mul(&x, &x);
        let y = tape.sum_all(&tape.add(&sq, &x));
        let grads = tape.backward(&y);
        let g = grads.get(&x).unwrap();
        assert!(g.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn detached_values_stop_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_elem((1, 1, 1, 1), 3.0));
        let y = tape.mul(&x, &x.detach());
        let grads = tape.backward(&y);
        assert_eq!(grads.get(&x).unwrap()[[0, 0, 0, 0]], 3.0);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = Array::ones((2, 3, 4, 5));
        let r = sum_to_shape(g, &[2, 1, 1, 1]);
        assert_eq!(r.shape(), &[2, 1, 1, 1]);
        assert_eq!(r[[1, 0, 0, 0]], 60.0);
    }
}
