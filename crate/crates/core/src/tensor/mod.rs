//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every op output keeps references to its operands and a backward rule.
//! Node ids grow monotonically at creation, so sorting reachable nodes by
//! descending id yields a valid reverse topological order for
//! [`Tensor::backward`].

mod conv;
mod gradcheck;
mod io;
mod linalg;
mod norm;
mod ops;
mod shape_ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use conv::{conv2d_naive, conv_out_extent};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use io::{read_weights, write_weights, WeightRecord, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use norm::{BatchNormStats, NormMode, BN_MOMENTUM, NORM_EPS};
pub use ops::Activation;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Bytes currently held by op outputs and owned leaves.
pub fn arena_live_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark of [`arena_live_bytes`] since the last reset.
pub fn arena_peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the current live byte count.
pub fn arena_reset_peak() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Gradient contributions for each parent, `None` where a parent gets nothing.
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;

/// `(grad_out, parents, out_data) -> per-parent gradients`
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &[f64]) -> ParentGrads + Send + Sync>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    tracked: usize,
}

impl Drop for Node {
    fn drop(&mut self) {
        if self.tracked > 0 {
            LIVE_BYTES.fetch_sub(self.tracked, Ordering::Relaxed);
        }
    }
}

/// Shared handle to one node of the differentiation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn track(bytes: usize) -> usize {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
    bytes
}

impl Tensor {
    fn from_node(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
        owned: bool,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = if owned {
            track(data.len() * std::mem::size_of::<f64>())
        } else {
            0
        };
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            parents,
            backward,
            tracked,
        }))
    }

    /// Leaf tensor without gradient tracking.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, Arc::new(data), false, true)
    }

    /// Leaf that shares storage with an existing buffer (parameters).
    pub fn from_shared(shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor> {
        Self::leaf(shape, data, requires_grad, false)
    }

    fn leaf(shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool, owned: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_node(shape.to_vec(), data, requires_grad, Vec::new(), None, owned))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_vec(shape, vec![0.0; numel(shape)]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::from_vec(shape, vec![value; numel(shape)]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::full(&[1], value)
    }

    /// Same storage and shape, as a fresh gradient-tracking leaf.
    pub fn requires_grad(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), true, Vec::new(), None, false)
    }

    /// Same storage, cut from any graph.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.0.shape.clone(), self.0.data.clone(), false, Vec::new(), None, false)
    }

    /// Builds an op output; the graph edge is only kept when some operand tracks gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Self::from_node(shape, Arc::new(data), true, parents, Some(backward), true)
        } else {
            Self::from_node(shape, Arc::new(data), false, Vec::new(), None, true)
        }
    }

    /// Output sharing the operand's storage under a new shape.
    pub(crate) fn view_op(&self, shape: Vec<usize>) -> Tensor {
        if self.0.requires_grad {
            Self::from_node(
                shape,
                self.0.data.clone(),
                true,
                vec![self.clone()],
                Some(Box::new(|g, _, _| vec![Some(g.to_vec())])),
                false,
            )
        } else {
            Self::from_node(shape, self.0.data.clone(), false, Vec::new(), None, false)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        Ok(self.0.data[0])
    }

    /// Gradient accumulated into this leaf by [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.0.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Reverse-mode sweep from a scalar output, accumulating into every
    /// gradient-tracking leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }

        let mut seen = HashSet::new();
        let mut order: Vec<&Tensor> = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            order.push(t);
            stack.extend(t.0.parents.iter().filter(|p| p.0.requires_grad));
        }
        order.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in order {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(rule) => {
                    let grads = rule(&g, &node.0.parents, &node.0.data);
                    for (parent, pg) in node.0.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
