use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Computes the gradient of each operand from the gradient of the result.
/// `needs[i]` tells whether operand `i` is tracked; untracked slots may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    /// Tracked operands as `(operand position, node id)`.
    parents: Vec<(usize, usize)>,
    arity: usize,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of differentiable operations.
///
/// Node ids increase in execution order, so reverse id order is a valid
/// reverse topological order. A tape is single-use: `backward` may run once.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records. Leaves are plain constants and
    /// intermediate values are freed as soon as their handles drop.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a gradient-tracked input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = self.recording.then(|| {
            self.push(Node {
                parents: Vec::new(),
                arity: 0,
                backward: None,
            })
        });
        Var {
            tape: self,
            node,
            value: Arc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            node: None,
            value: Arc::new(value),
        }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records `value = op(operands)`. The closure is only kept when at least
    /// one operand is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        operands: &[&Var<'_, T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let parents: Vec<(usize, usize)> = operands
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                debug_assert!(std::ptr::eq(v.tape, self), "operands from a different tape");
                v.node.map(|n| (i, n))
            })
            .collect();
        let node = (self.recording && !parents.is_empty()).then(|| {
            self.push(Node {
                parents,
                arity: operands.len(),
                backward: Some(Box::new(backward)),
            })
        });
        Var {
            tape: self,
            node,
            value: Arc::new(value),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of every reachable
    /// leaf are returned; contributions from multiple uses add up.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Grads<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::Graph("loss does not depend on any gradient-tracked tensor".into())
        })?;
        if self.consumed.replace(true) {
            return Err(Error::Graph(
                "backward already ran on this tape; build a new tape per step".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                leaves.insert(id, g);
                continue;
            };
            let mut needs = vec![false; node.arity];
            for &(pos, _) in &node.parents {
                needs[pos] = true;
            }
            let mut operand_grads = backward(&g, &needs);
            for &(pos, parent) in &node.parents {
                let Some(pg) = operand_grads[pos].take() else { continue };
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T: Scalar> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|n| self.leaves.get(&n))
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        var.node.and_then(|n| self.leaves.remove(&n))
    }
}

/// A tensor value living on a tape. Cloning is cheap (shared value).
#[derive(Clone)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) node: Option<usize>,
    pub(crate) value: Arc<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            node: None,
            value: self.shared(),
        }
    }
}
