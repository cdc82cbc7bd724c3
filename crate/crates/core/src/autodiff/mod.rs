//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Values live on the tape;
//! callers hold lightweight [`Var`] handles. A tape can be reset, which bumps
//! its epoch and invalidates every handle issued before.

mod backward;
mod gradcheck;
mod ops;
mod relevance;

pub use gradcheck::{finite_difference_check, GradCheck};
pub(crate) use ops::Op;
pub use ops::{sign0, OpKind};
pub use relevance::{Relevance, RelevanceOptions};

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_EPOCH: AtomicU32 = AtomicU32::new(1);

fn fresh_epoch() -> u32 {
    NEXT_EPOCH.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: u32,
    epoch: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id as usize
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    /// Depends on an input leaf through a path that carries relevance.
    pub signal: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Ordered record of operations.
///
/// Records are appended as operations execute, so every record's inputs
/// precede it. [`Tape::backward`] visits each record once in reverse.
pub struct Tape {
    inner: RefCell<Inner>,
    epoch: std::cell::Cell<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            epoch: std::cell::Cell::new(fresh_epoch()),
        }
    }

    pub fn epoch(&self) -> u32 {
        self.epoch.get()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all records. Handles issued before the reset become stale.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads = None;
        self.epoch.set(fresh_epoch());
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(t, rg, false)
    }

    /// Records a model input. Inputs carry relevance during LRP.
    pub fn input(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(t, rg, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_leaf(t, false, false)
    }

    fn push_leaf(&self, mut t: Tensor, requires_grad: bool, signal: bool) -> Var {
        t.set_requires_grad(false);
        self.push_node(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            signal,
        })
    }

    fn push_node(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            id: (inner.nodes.len() - 1) as u32,
            epoch: self.epoch.get(),
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.epoch != self.epoch.get() {
            return Err(Error::Autodiff(format!(
                "stale handle from tape epoch {} used on epoch {}",
                v.epoch,
                self.epoch.get()
            )));
        }
        if v.index() >= self.len() {
            return Err(Error::Autodiff(format!("unknown handle {}", v.id)));
        }
        Ok(())
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Result<Tensor> {
        self.check(v)?;
        Ok(self.inner.borrow().nodes[v.index()].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        self.check(v)?;
        Ok(self.inner.borrow().nodes[v.index()].value.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.inner.borrow().nodes[v.index()].requires_grad)
    }

    pub fn op_kind(&self, v: Var) -> Result<OpKind> {
        self.check(v)?;
        Ok(self.inner.borrow().nodes[v.index()].op.kind())
    }

    /// Number of recorded operations of the given kind.
    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.inner.borrow().nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// Available for every recorded value that requires grad, leaves and
    /// intermediates alike.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        self.check(v)?;
        let inner = self.inner.borrow();
        let grads = inner
            .grads
            .as_ref()
            .ok_or_else(|| Error::Autodiff("backward has not been run".into()))?;
        Ok(grads[v.index()]
            .as_ref()
            .map(|g| Tensor::from_parts(inner.nodes[v.index()].value.shape().to_vec(), g.clone())))
    }

    pub fn has_grads(&self) -> bool {
        self.inner.borrow().grads.is_some()
    }

    /// Forgets computed gradients so that `backward` may run again.
    pub fn clear_grads(&self) {
        self.inner.borrow_mut().grads = None;
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Rejected when the root is not a single value, belongs to another
    /// epoch, or gradients from a previous sweep have not been cleared.
    pub fn backward(&self, root: Var) -> Result<()> {
        self.check(root)?;
        let n_values = self.inner.borrow().nodes[root.index()].value.len();
        if n_values != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got {n_values} values"
            )));
        }
        self.backward_with_seed(root, vec![1.0])
    }

    /// Reverse-mode sweep seeded with an arbitrary output cotangent.
    pub fn backward_with_seed(&self, root: Var, seed: Vec<f64>) -> Result<()> {
        self.check(root)?;
        if self.has_grads() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; clear_grads() first".into(),
            ));
        }
        let grads = {
            let inner = self.inner.borrow();
            let root_node = &inner.nodes[root.index()];
            if seed.len() != root_node.value.len() {
                return Err(Error::dim(format!(
                    "seed of length {} for root of shape {:?}",
                    seed.len(),
                    root_node.value.shape()
                )));
            }
            if !root_node.requires_grad {
                return Err(Error::Autodiff(
                    "root is detached: nothing upstream requires grad".into(),
                ));
            }
            backward::sweep(&inner.nodes, root.index(), seed)?
        };
        self.inner.borrow_mut().grads = Some(grads);
        Ok(())
    }
}
