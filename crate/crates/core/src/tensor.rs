//! Dense tensors with a reverse-mode gradient tape.
//!
//! Every op result remembers its parents and a backward closure when at
//! least one parent requires a gradient and recording is enabled. Calling
//! [`Tensor::backward`] walks the recorded DAG once in reverse topological
//! order and *accumulates* into the `grad` slot of each leaf that requires a
//! gradient. Gradients are never cleared implicitly; use
//! [`Tensor::zero_grad`] between optimizer steps.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::numel;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph on this thread.
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

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage and gradient.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE.name())
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor, optionally tracked.
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_parts(data, shape.to_vec(), requires_grad, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], Vec::new(), false, None)
    }

    /// Result of an op. Records `backward` only when some parent needs a
    /// gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            let grad_fn = GradFn {
                op,
                parents,
                backward: Box::new(backward),
            };
            Self::from_parts(data, shape, true, Some(grad_fn))
        } else {
            Self::from_parts(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    /// Extent of `axis`; panics when out of range.
    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.node.grad_fn.as_ref().map_or("leaf", |g| g.op)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.read().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.node.data.read();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.read().iter().all(|v| v.is_finite())
    }

    /// Overwrites leaf storage in place. Reserved for optimizers and
    /// running-statistics buffers.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::invalid("update_data", "only leaf tensors can be mutated"));
        }
        f(&mut self.node.data.write());
        Ok(())
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("set_data", self.shape(), &[values.len()]));
        }
        self.update_data(|d| d.copy_from_slice(values))
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad()
            .map(|g| Self::from_parts(g, self.node.shape.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock() = None;
    }

    /// Fresh untracked leaf holding a copy of the values.
    pub fn detach(&self) -> Tensor<T> {
        Self::from_parts(self.to_vec(), self.node.shape.clone(), false, None)
    }

    /// Fresh leaf holding a copy of the values, tracked if requested.
    pub fn to_leaf(&self, requires_grad: bool) -> Tensor<T> {
        Self::from_parts(self.to_vec(), self.node.shape.clone(), requires_grad, None)
    }

    /// Same values converted to another element type (untracked leaf).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::from_parts(data, self.node.shape.clone(), false, None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from a single-element tensor with seed 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("needs a single-element output, got shape {:?}", self.shape()),
            ));
        }
        self.backward_with(vec![T::one()])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape("backward", self.shape(), &[seed.len()]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(gf) = &t.node.grad_fn else {
                t.accumulate_grad(&g);
                continue;
            };
            let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let grads = (gf.backward)(&g, &needs);
            debug_assert_eq!(grads.len(), gf.parents.len(), "{} backward arity", gf.op);
            for ((p, need), pg) in gf.parents.iter().zip(&needs).zip(grads) {
                let (true, Some(pg)) = (*need, pg) else {
                    continue;
                };
                debug_assert_eq!(pg.len(), p.numel(), "{} backward shape", gf.op);
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, finished)) = stack.pop() {
            if finished {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
