//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable-after-forward value (parameters are mutated
//! only between forward passes, by the optimizer or by noise injection). A
//! [`Tape`] records the primitive ops of one forward pass and replays them in
//! reverse to accumulate gradients into `requires_grad` leaves. Tapes are
//! confined to a single thread; tensors may be shared freely.

mod element;
mod grad_check;
mod kernels;
mod ops;

pub use element::Element;
pub use grad_check::{grad_check, GradCheckReport};
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

use crate::error::{CapError, Result};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

struct TensorInner<E: Element> {
    id: u64,
    dims: Vec<usize>,
    data: RwLock<Vec<E>>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<E>>>,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
pub struct Tensor<E: Element> {
    inner: Arc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("dims", &self.inner.dims)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from dims and a flat row-major buffer.
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() || dims.iter().any(|&d| d == 0) {
            return Err(CapError::InvalidArgument(format!(
                "tensor dims {:?} do not match buffer length {}",
                dims,
                data.len()
            )));
        }
        Ok(Self::from_parts(dims, data, false))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let t = Self::new(dims, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims, vec![E::ZERO; n], false)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![1], vec![v], false)
    }

    fn from_parts(dims: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                dims,
                data: RwLock::new(data),
                requires_grad: AtomicBool::new(requires_grad),
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn len(&self) -> usize {
        self.inner.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.load(Ordering::Relaxed)
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.store(v, Ordering::Relaxed);
    }

    /// Read access to the flat buffer.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.inner.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1);
        self.data()[0]
    }

    /// Overwrite the buffer in place. Caller owns the single-writer contract:
    /// never while a forward pass that reads this tensor is in flight.
    pub fn set_data(&self, data: &[E]) {
        let mut guard = self.inner.data.write().unwrap();
        assert_eq!(guard.len(), data.len(), "set_data length mismatch");
        guard.copy_from_slice(data);
    }

    /// In-place elementwise update under the write lock.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        let mut guard = self.inner.data.write().unwrap();
        f(&mut guard);
    }

    /// Accumulated gradient, if any backward pass has touched this leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub fn accumulate_grad(&self, g: &[E]) {
        let mut guard = self.inner.grad.lock().unwrap();
        match guard.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Value copy detached from any tape and from gradient accumulation.
    pub fn detach(&self) -> Tensor<E> {
        Self::from_parts(self.inner.dims.clone(), self.to_vec(), false)
    }

    /// Deep copy preserving the `requires_grad` flag (fresh id, fresh grad).
    pub fn deep_clone(&self) -> Tensor<E> {
        Self::from_parts(self.inner.dims.clone(), self.to_vec(), self.requires_grad())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|v| F::from_f64(v.to_f64())).collect();
        Tensor::from_parts(self.inner.dims.clone(), data, self.requires_grad())
    }
}

type BackwardFn<E> = Box<dyn Fn(&[E], &[bool], &mut dyn FnMut(usize, Vec<E>))>;

struct Node<E: Element> {
    output_id: u64,
    inputs: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

/// Records one forward pass. Confined to a single thread.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    /// Tensor id -> index of the node that produced it on this tape.
    attached: RefCell<HashMap<u64, usize>>,
    /// requires_grad leaves seen as operands on this tape.
    leaves: RefCell<HashMap<u64, Tensor<E>>>,
    recording: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            attached: RefCell::new(HashMap::new()),
            leaves: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    /// Forward-only tape: computes values, records nothing.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Drop all recorded nodes; outputs become stale for backward.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.attached.borrow_mut().clear();
        self.leaves.borrow_mut().clear();
    }

    fn wants_grad(&self, t: &Tensor<E>) -> bool {
        t.requires_grad() || self.attached.borrow().contains_key(&t.id())
    }

    fn record(&self, inputs: Vec<Tensor<E>>, output: &Tensor<E>, backward: BackwardFn<E>) {
        if !self.recording || !inputs.iter().any(|t| self.wants_grad(t)) {
            return;
        }
        for t in &inputs {
            if t.requires_grad() && !self.attached.borrow().contains_key(&t.id()) {
                self.leaves.borrow_mut().entry(t.id()).or_insert_with(|| t.clone());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        self.attached.borrow_mut().insert(output.id(), idx);
        nodes.push(Node {
            output_id: output.id(),
            inputs,
            backward,
        });
    }

    /// Reverse pass from a scalar loss: accumulates d(loss)/d(leaf) into
    /// every reachable `requires_grad` leaf. Accumulation is additive; the
    /// caller zeroes grads between steps.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.len() != 1 {
            return Err(CapError::NonScalarLoss(loss.dims().to_vec()));
        }
        if !self.attached.borrow().contains_key(&loss.id()) {
            return Err(CapError::DetachedLoss);
        }
        let nodes = self.nodes.borrow();
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(loss.id(), vec![E::ONE]);

        for node in nodes.iter().rev() {
            let Some(gout) = grads.remove(&node.output_id) else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|t| self.wants_grad(t)).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let mut sink = |i: usize, g: Vec<E>| {
                let id = node.inputs[i].id();
                match grads.entry(id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let acc = e.get_mut();
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
            };
            (node.backward)(&gout, &needs, &mut sink);
        }

        for (id, leaf) in self.leaves.borrow().iter() {
            if let Some(g) = grads.remove(id) {
                leaf.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

pub(crate) fn shape_err<E: Element>(
    op: &'static str,
    lhs: &Tensor<E>,
    rhs: &Tensor<E>,
) -> CapError {
    CapError::Shape {
        op,
        lhs: lhs.dims().to_vec(),
        rhs: rhs.dims().to_vec(),
    }
}

#[cfg(test)]
mod tests;
