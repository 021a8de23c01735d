//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Just enough machinery to express and train the attention models in this
//! crate: row-major buffers, a thread-confined tape built implicitly as ops
//! run, and a [`Tensor::backward`] sweep that populates gradients on every
//! reachable tensor with `requires_grad` set.
//!
//! Values are immutable once built; the only mutation is gradient
//! accumulation during a backward sweep, so sharing tensors for reading is
//! always safe within a thread. Graphs (and therefore training) are confined
//! to one thread; parallelism happens across independent model instances.

mod element;
pub mod flops;
pub mod gradcheck;
pub mod io;
mod kernels;
mod linalg;
pub mod norm;
mod ops;
mod param;

pub use element::{Dtype, Element};
pub use param::{xavier_uniform, ParamSet, Parameter, Snapshot};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with gradient taping disabled: ops built inside produce plain
/// values with no parents, so evaluation-only forwards free memory eagerly.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Backward function: called with (upstream gradient, this node's output
/// values); accumulates into the parents it captured.
type BackwardFn<E> = Box<dyn FnOnce(&[E], &[E])>;

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Dense n-dimensional array, shared by handle. Cloning is cheap (`Rc`).
pub struct Tensor<E: Element> {
    inner: Rc<RefCell<Node<E>>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Tensor<E> {
    fn new_node(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: next_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Builds a tensor from row-major data; errors if extents do not match.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_node(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![E::default(); numel], false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![value; numel], false)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: E) -> Self {
        Self::new_node(Vec::new(), vec![value], false)
    }

    /// Marks this (leaf) tensor as a trainable input of the graph.
    pub fn set_requires_grad(&self, on: bool) -> &Self {
        self.inner.borrow_mut().requires_grad = on;
        self
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: impl FnOnce(&[E], &[E]) + 'static,
    ) -> Self {
        let taping = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let t = Self::new_node(shape, data, taping);
        if taping {
            let mut n = t.inner.borrow_mut();
            n.parents = parents;
            n.backward = Some(Box::new(backward));
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Copies the values out.
    pub fn value(&self) -> Vec<E> {
        self.inner.borrow().data.clone()
    }

    /// Reads the values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> E {
        let n = self.inner.borrow();
        debug_assert_eq!(n.data.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    /// Gradient accumulated by the last backward sweep, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the values of a leaf tensor (optimizer updates).
    /// Panics if the tensor is an op result still wired into a graph.
    pub fn set_value(&self, data: Vec<E>) {
        let mut n = self.inner.borrow_mut();
        assert!(
            n.backward.is_none() && n.parents.is_empty(),
            "set_value on a non-leaf tensor"
        );
        assert_eq!(n.data.len(), data.len(), "set_value length mismatch");
        n.data = data;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut n = self.inner.borrow_mut();
        debug_assert_eq!(n.data.len(), delta.len());
        match &mut n.grad {
            Some(g) => {
                for (gv, &dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    /// A fresh leaf with the same values and no graph history.
    pub fn detach(&self) -> Tensor<E> {
        let n = self.inner.borrow();
        Self::new_node(n.shape.clone(), n.data.clone(), false)
    }

    /// Reverse-mode sweep from a scalar result. Gradients accumulate
    /// additively across fan-out; every reachable tensor with
    /// `requires_grad` ends up with a populated gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that does not require gradients".into(),
            ));
        }

        // Collect reachable grad-requiring nodes. Creation ids are a valid
        // topological order because parents always precede children.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() {
                continue;
            }
            if seen.insert(t.id()) {
                for p in t.inner.borrow().parents.iter() {
                    stack.push(p.clone());
                }
                nodes.push(t);
            }
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        self.accumulate_grad(&[E::one()]);
        for node in nodes {
            let f = node.inner.borrow_mut().backward.take();
            let Some(f) = f else { continue };
            let upstream = node.inner.borrow().grad.clone();
            // A reachable node can still have no gradient if its value never
            // fed the loss (e.g. captured diagnostics); contribution is zero.
            let Some(upstream) = upstream else { continue };
            let n = node.inner.borrow();
            f(&upstream, &n.data);
        }
        Ok(())
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}, data[..4]: {:?}}}",
            n.shape,
            n.requires_grad,
            &n.data[..n.data.len().min(4)]
        )
    }
}

pub(crate) fn shape_err<E: Element>(
    op: &'static str,
    lhs: &Tensor<E>,
    rhs: &Tensor<E>,
) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::<f32>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.set_requires_grad(true);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x * x): grad = 2x, via two uses of the same tensor.
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.set_requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn no_grad_suppresses_taping() {
        let x = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
    }

    #[test]
    fn intermediate_grads_are_populated() {
        let x = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        x.set_requires_grad(true);
        let y = x.scale(2.0);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn detach_breaks_the_graph() {
        let x = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = x.scale(3.0).detach();
        assert!(!y.requires_grad());
        assert_eq!(y.value(), vec![3.0, 6.0]);
    }
}
