//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each recorded
//! node keeps the ids of its inputs and, when any input requires a gradient,
//! a backward rule mapping the output gradient to input gradients. Node ids
//! are assigned in creation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
mod nn;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use gradcheck::{grad_check, grad_check_with};
pub use nn::{NormAxes, Padding};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Everything a backward rule may read.
pub struct Backprop<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

/// Returns one entry per input, `None` where no gradient is needed.
pub type BackwardFn = Box<dyn Fn(&Backprop<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    dtype: DType,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(DType::F64)
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("dtype", &self.dtype)
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.op, n.value.shape())
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            dtype,
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let value = value.to_dtype(self.dtype);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: if requires_grad { "leaf" } else { "constant" },
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an op output. The value is rounded to the tape dtype and
    /// checked for finiteness; the backward rule is dropped when no input
    /// requires a gradient.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[Var<'_>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let value = value.to_dtype(self.dtype);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Accumulates `d root / d leaf` into every leaf reachable from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::NotScalar(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(Error::Detached);
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        work[root.id] = Some(vec![1.0]);
        let mut stored = self.grads.borrow_mut();
        if stored.len() < nodes.len() {
            stored.resize(nodes.len(), None);
        }
        for id in (0..=root.id).rev() {
            let Some(grad) = work[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                // leaf: keep the gradient
                if node.requires_grad {
                    match &mut stored[id] {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        slot => *slot = Some(grad),
                    }
                }
                continue;
            };
            let inputs: Vec<Rc<Tensor>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let grads = rule(&Backprop {
                grad: &grad,
                out: &node.value,
                inputs: &inputs,
                needs: &needs,
            });
            debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[input].value.len(), "{}", node.op);
                match &mut work[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` for non-leaves,
    /// constants, and leaves the root does not depend on.
    pub fn grad(&self) -> Option<Tensor> {
        let g = self.tape.grads.borrow().get(self.id).cloned().flatten()?;
        let shape = self.shape();
        Some(Tensor::from_parts(shape, g, DType::F64))
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
