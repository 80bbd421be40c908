//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle to an immutable node in
//! a computation graph. Operations on tensors that require gradients record
//! a backward closure together with their parents; [`Tensor::backward`]
//! walks the graph in reverse topological order and accumulates gradients
//! into every leaf created with [`Tensor::param`].
//!
//! Graphs are confined to the thread that built them (`Tensor` is `!Send`).
//! Use [`Tensor::to_vec`] to move values across threads.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use ops::{Conv2dSpec, PoolSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule: `(grad_out, out_data) -> grad per parent`.
type BackwardFn = dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>;

struct Backward {
    parents: Vec<Tensor>,
    func: Box<BackwardFn>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    backward: Option<Backward>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("{} values for shape {:?}", data.len(), shape),
            });
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            backward: None,
        })))
    }

    /// Constant (no gradient) tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf; receives a gradient on [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![v], vec![], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel(shape)], shape.to_vec(), false).expect("zeros shape")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false).expect("full shape")
    }

    /// Result of an operation. Records `backward` only when some parent
    /// takes part in differentiation.
    pub(crate) fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, parents: &[&Tensor], backward: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward = requires_grad.then(|| Backward {
            parents: parents.iter().map(|&p| p.clone()).collect(),
            func: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Gradient accumulated by the last `backward` calls (leaves only).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.shape().to_vec(), false).expect("same shape")
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from this scalar. Leaf gradients accumulate (`+=`)
    /// across calls and across multiple uses of a leaf within the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.requires_grad() {
                        let mut slot = node.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(bw) => {
                    let parent_grads = (bw.func)(&g, &node.0.data);
                    debug_assert_eq!(parent_grads.len(), bw.parents.len());
                    for (parent, pg) in bw.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through gradient-carrying edges, parents
    /// before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(bw) = &t.0.backward {
                for p in &bw.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests;
