use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Computes the adjoint of each parent from the output gradient. Entries for
/// parents whose `needs[i]` is false may be `None`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>>>;

pub(crate) struct BackwardCtx<'a, T: Element> {
    pub parents: &'a [Var<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: Vec<bool>,
}

impl<T: Element> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        self.parents[i].value()
    }
}

struct Recorded<T: Element> {
    op: &'static str,
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    recorded: Option<Recorded<T>>,
}

/// A tensor participating in a computation graph.
///
/// Cloning is cheap (reference counted). Nodes that do not require a gradient
/// keep no reference to their inputs, so inference-only graphs free their
/// intermediates as soon as they go out of scope.
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

impl<T: Element> Var<T> {
    /// A graph leaf. Gradients accumulate into leaves that require them.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad: RefCell::new(None),
            recorded: None,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let recorded = requires_grad.then(|| Recorded {
            op,
            parents,
            backward,
        });
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad: RefCell::new(None),
            recorded,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.recorded.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.recorded.as_ref().map_or("leaf", |r| r.op)
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn parents(&self) -> &[Var<T>] {
        self.0.recorded.as_ref().map_or(&[], |r| &r.parents)
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls
    /// until [`Var::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = ComputeGraph::from_output(self);
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for node in graph.nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(rec) = node.0.recorded.as_ref() else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let ctx = BackwardCtx {
                parents: &rec.parents,
                output: node.value(),
                grad: &grad,
                needs: rec.parents.iter().map(Var::requires_grad).collect(),
            };
            let parent_grads = (rec.backward)(&ctx)?;
            debug_assert_eq!(parent_grads.len(), rec.parents.len());
            for (parent, pg) in rec.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.value().numel(), "adjoint of {}", rec.op);
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a = *a + *g),
                    None => {
                        pending.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded operations reachable from an output, in creation order.
///
/// Creation order is a topological order: an operation's node is created
/// after all of its inputs exist.
pub struct ComputeGraph<T: Element> {
    nodes: Vec<Var<T>>,
}

impl<T: Element> ComputeGraph<T> {
    pub fn from_output(output: &Var<T>) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![output.clone()];
        let mut nodes = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.parents().iter().cloned());
            nodes.push(v);
        }
        nodes.sort_by_key(Var::id);
        ComputeGraph { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in topological order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(Var::op_name).collect()
    }

    /// True when every node appears after all of its parents.
    pub fn is_topologically_ordered(&self) -> bool {
        let pos: HashMap<u64, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id(), i))
            .collect();
        self.nodes.iter().enumerate().all(|(i, v)| {
            v.parents()
                .iter()
                .filter_map(|p| pos.get(&p.id()))
                .all(|&pi| pi < i)
        })
    }
}
