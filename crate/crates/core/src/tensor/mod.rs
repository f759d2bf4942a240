//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by a differentiable operation keeps a reference
//! to its inputs together with a closure that maps the output gradient back
//! onto them. Calling [`Tensor::backward`] on a scalar walks that graph in
//! reverse topological order and accumulates gradients into the leaves that
//! were created with `requires_grad`.
//!
//! Tensors are cheap handles (`Rc`) and are not `Send`; one training step
//! builds and drops its own graph on a single thread.

mod container;
mod conv;
mod ops;
mod pool;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use container::{read_container, write_container, NamedTensor};
pub use conv::conv2d;
pub use ops::Elementwise;
pub use pool::{Pool, Reduce};

/// Floating point element type (`f32` for training, `f64` for gradient checks).
pub trait Real:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    /// `trans_a`/`trans_b` read the stored matrix transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices were checked to cover m×k, k×n and m×n
                // elements for the strides chosen above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
}

impl<T: Real> BackwardCtx<'_, T> {
    #[inline]
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Op<T> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Row-major N-dimensional array participating in reverse-mode differentiation.
pub struct Tensor<T = f32>(Rc<Node<T>>);

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
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

fn leaf<T>(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Tensor<T> {
    Tensor(Rc::new(Node {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        shape,
        data: RefCell::new(data),
        grad: RefCell::new(None),
        requires_grad,
        op: None,
    }))
}

impl<T: Real> Tensor<T> {
    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        if numel(shape) != len {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {len}",
                numel(shape)
            )));
        }
        Ok(())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_len(shape, data.len())?;
        Ok(leaf(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_len(shape, data.len())?;
        Ok(leaf(shape.to_vec(), data, true))
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Records a new node. `backward` receives the output gradient and must
    /// return one optional gradient per input (only consulted for inputs that
    /// require grad).
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return leaf(shape, data, false);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            op: Some(Op {
                inputs,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank-4 tensor, got {:?}", self.0.shape))),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// In-place update of a leaf's values (optimizer steps, test perturbations).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    pub fn set_data(&self, data: &[T]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(format!(
                "cannot assign {} values to tensor of shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        self.update_data(|d| d.copy_from_slice(data));
        Ok(())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Converts to another element type as a fresh non-trainable leaf.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::of(v.to_f64_lossy())).collect();
        leaf(self.0.shape.clone(), data, false)
    }

    /// Accumulates `d self / d leaf` into every trainable leaf reachable from
    /// this scalar. Repeated calls without [`Tensor::zero_grad`] sum up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::one()]);
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &g)| *a = *a + g),
                        None => *slot = Some(grad),
                    }
                }
                Some(op) => {
                    let output = node.0.data.borrow();
                    let ctx = BackwardCtx {
                        grad: &grad,
                        inputs: &op.inputs,
                        output: &output,
                    };
                    let input_grads = (op.backward)(&ctx);
                    debug_assert_eq!(input_grads.len(), op.inputs.len());
                    for (input, g) in op.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel());
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                            None => {
                                grads.insert(input.0.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes that require grad, each listed after all of its inputs.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, next)) = stack.pop() {
            let inputs = node.0.op.as_ref().map(|op| op.inputs.as_slice()).unwrap_or(&[]);
            if next < inputs.len() {
                let child = inputs[next].clone();
                stack.push((node, next + 1));
                if child.requires_grad() && visited.insert(child.0.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl<T> Drop for Node<T> {
    // Long chains of ops would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let mut pending: Vec<Tensor<T>> = self.op.take().map(|op| op.inputs).unwrap_or_default();
        while let Some(t) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    pending.extend(op.inputs);
                }
            }
        }
    }
}
