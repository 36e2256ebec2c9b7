//! Dense tensors with a dynamically built reverse-mode graph.
//!
//! Every op output keeps handles to its inputs and a closure that maps the
//! output gradient onto input gradients. Calling [`Tensor::backward`] on a
//! scalar walks the graph in reverse topological order and accumulates the
//! result into the `grad` slot of every leaf that requires gradients.
//!
//! Handles are reference counted and not `Send`: a graph belongs to the
//! thread that built it.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a [f64],
    pub inputs: &'a [Tensor],
}

impl BackwardCtx<'_> {
    #[inline]
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    inputs: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor. Fails if `data.len()` disagrees with `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("{} values do not fill shape {:?}", data.len(), shape),
            });
        }
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Dimension {
                op: "tensor",
                detail: format!("shape {shape:?} has a zero extent"),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            inputs: Vec::new(),
            backward: None,
        }))
    }

    /// Output of an op. The backward closure and input handles are kept only
    /// when some input participates in differentiation.
    pub(crate) fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, inputs: Vec<Tensor>, f: F) -> Self
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(data.len(), numel_of(&shape));
        if !inputs.iter().any(Tensor::requires_grad) {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            inputs,
            backward: Some(Box::new(f)),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Overwrite the values in place. Used by optimizers and checkpoint loads.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::Dimension {
                op: "set_data",
                detail: format!("{} values for shape {:?}", values.len(), self.0.shape),
            });
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Only meaningful on leaves; op outputs derive the flag from their inputs.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient, or zeros when nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a single-element tensor.
    ///
    /// Gradients add onto whatever the leaves already hold, so two sweeps
    /// without [`Tensor::zero_grad`] in between double the result.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let out = node.0.data.borrow();
                    let ctx = BackwardCtx {
                        grad: &g,
                        out: &out,
                        inputs: &node.0.inputs,
                    };
                    let grads = f(&ctx);
                    for (input, gi) in node.0.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel());
                        match pending.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.key(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.inputs.len() {
                let child = node.0.inputs[next].clone();
                stack.push((node, next + 1));
                if child.requires_grad() && seen.insert(child.key()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
