//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a
//! backward rule on the output node. Calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse topological order and accumulates
//! gradients into every gradient-tracking leaf. Leaf gradients are never
//! zeroed implicitly: a second `backward` adds to the first.

mod element;
pub mod fault;
mod init;
mod linalg;
mod nn;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use element::Float;
pub use nn::{BatchNormMode, Conv2dGeometry};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward rules.
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

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the upstream gradient of an op's output to one optional gradient per
/// input (`None` where the input does not track gradients).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// the node.
pub struct Tensor<T: Float = f64>(Rc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .field("data", &preview)
            .finish()
    }
}

/// One entry of a [`ComputationRecord`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedOp {
    pub op: &'static str,
    pub inputs: Vec<u64>,
    pub output: u64,
}

/// Operations reachable from a tensor, in topological order: every op's
/// inputs are produced before it.
#[derive(Debug, Clone, Default)]
pub struct ComputationRecord {
    pub ops: Vec<RecordedOp>,
}

impl ComputationRecord {
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(|o| o.op).collect()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    /// Builds an op output. The backward rule is only kept when grad mode is
    /// on and some input tracks gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        let tracked = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = tracked.then(|| GradFn {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: tracked,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A gradient-tracking leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_param())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64(v).unwrap()).collect(), shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Copies the data into a fresh gradient-tracking leaf.
    pub fn into_param(self) -> Self {
        let data = self.0.data.borrow().clone();
        Self::leaf(data, self.0.shape.clone(), true)
    }

    /// Copies the data into a fresh leaf that does not track gradients.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.borrow().clone(), self.0.shape.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.to_f64().unwrap()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites leaf data in place. Used by optimizers and checkpoint
    /// loading between steps, never while a graph is being differentiated.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut slot = self.0.data.borrow_mut();
        if data.len() != slot.len() {
            return Err(Error::shape("set_data", &self.0.shape, &[data.len()]));
        }
        *slot = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes reachable from `self`, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for input in gf.inputs.iter().rev() {
                    if !visited.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    pub fn record(&self) -> ComputationRecord {
        let ops = self
            .topo_order()
            .into_iter()
            .filter_map(|t| {
                t.0.grad_fn.as_ref().map(|gf| RecordedOp {
                    op: gf.op,
                    inputs: gf.inputs.iter().map(|i| i.0.id).collect(),
                    output: t.0.id,
                })
            })
            .collect();
        ComputationRecord { ops }
    }

    /// Accumulates d(self)/d(leaf) into every gradient-tracking leaf reachable
    /// from this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.0.id, vec![T::one()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                None => node.accumulate_grad(&grad),
                Some(gf) => {
                    let mut input_grads = (gf.backward)(&grad);
                    fault::apply(gf.op, &mut input_grads);
                    for (input, g) in gf.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "{} backward", gf.op);
                        match pending.get_mut(&input.0.id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.0.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
