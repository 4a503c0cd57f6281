//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is a tape of reference-counted nodes; each op stores a closure
//! that routes the output gradient to its parents. `backward` walks the
//! graph once in reverse topological order, so a tensor feeding two
//! consumers receives the sum of both contributions.

mod ops;
pub mod rng;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type for tensor math. Training uses `f32`; `f64` exists for
/// gradient verification.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + 'static {
    fn c(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn<F> = Box<dyn Fn(&[F])>;

struct Inner<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Shape-tagged numeric array with optional gradient and autograd lineage.
pub struct Tensor<F: Scalar> {
    inner: Rc<RefCell<Inner<F>>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    fn from_inner(inner: Inner<F>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor::from_inner(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Constant tensor (not tracked by autograd).
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        Tensor::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<F>) -> Self {
        Tensor::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![F::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape, vec![F::c(value); numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![F::c(value)])
    }

    /// Result of an op: gradients flow only if some parent requires them.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite op output");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor::from_inner(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    pub fn data(&self) -> Ref<'_, [F]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.borrow().data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.iter().map(|x| x.f64()).collect()
    }

    /// Scalar value; panics on non-scalar tensors.
    pub fn item(&self) -> F {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on shape {:?}", inner.shape);
        inner.data[0]
    }

    /// Replaces the buffer in place (optimizer updates, perturbations).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Multiplies the accumulated gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: F) {
        if let Some(grad) = &mut self.inner.borrow_mut().grad {
            for g in grad.iter_mut() {
                *g = *g * factor;
            }
        }
    }

    /// Same buffer as a fresh constant leaf; gradients do not flow past it.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::new(&self.shape(), self.to_vec())
    }

    pub(crate) fn accumulate_grad(&self, g: &[F]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let len = inner.data.len();
        debug_assert_eq!(len, g.len());
        let grad = inner.grad.get_or_insert_with(|| vec![F::zero(); len]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst = *dst + src;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every reachable tensor that requires them; repeated calls add up
    /// unless grads are zeroed in between.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        // Leaf grads accumulate across calls; intermediate grads are
        // per-sweep state and must start clean or a second sweep
        // double-counts through them.
        for node in &order {
            if node.inner.borrow().backward.is_some() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(&[F::one()]);
        for node in order.iter().rev() {
            // The closure only touches parent nodes, so holding this borrow
            // while it runs is safe (ops are never their own parent).
            let inner = node.inner.borrow();
            if let (Some(bw), Some(grad)) = (&inner.backward, &inner.grad) {
                let grad = grad.clone();
                bw(&grad);
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; (node, next child index) frames.
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.borrow().id);
        while let Some((node, child_idx)) = stack.pop() {
            let next_child = {
                let inner = node.inner.borrow();
                inner.parents.get(child_idx).cloned()
            };
            match next_child {
                Some(child) => {
                    stack.push((node, child_idx + 1));
                    let id = child.inner.borrow().id;
                    if visited.insert(id) && child.requires_grad() {
                        stack.push((child, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}
