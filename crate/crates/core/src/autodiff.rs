//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation is a method on [`Tape`] returning a [`Var`].
//! When the tape records, each op pushes a node holding a backward closure;
//! [`Tape::backward`] replays those closures in reverse recording order.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// A value flowing through the graph, with its node id when it is tracked.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }

    pub(crate) fn arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }
}

/// Single-writer operation log. One training step owns one tape.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            checked: false,
        }
    }

    /// A tape that records nothing; intermediates are freed as soon as they
    /// go out of scope.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// In checked mode every op output is scanned for NaN/Inf.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_arc(Arc::new(value))
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>) -> Var<T> {
        let node = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var { value, node }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, node: None }
    }

    /// Record an op result. `backward` receives the output gradient and a mask
    /// saying which inputs need a gradient; it returns one entry per input.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: F,
    ) -> Result<Var<T>>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                stage: op.to_string(),
            });
        }
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: inputs
                    .iter()
                    .map(|v| v.node.unwrap_or(usize::MAX))
                    .collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var {
            value: Arc::new(value),
            node,
        })
    }

    /// Fail with a stage-named diagnostic if `v` holds non-finite values
    /// and the tape is in checked mode.
    pub fn check_stage(&self, stage: &str, v: &Var<T>) -> Result<()> {
        if self.checked && !v.value.all_finite() {
            return Err(Error::NonFinite {
                stage: stage.to_string(),
            });
        }
        Ok(())
    }

    /// Propagate d(loss)/d(node) back to every tracked leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        ensure!(
            loss.value.len() == 1,
            "backward",
            "loss must be a scalar, got shape {:?}",
            loss.shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if p == usize::MAX {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => {
                            debug_assert_eq!(acc.shape(), pg.shape());
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf is untracked or unreachable.
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.node.and_then(|id| self.grads.get_mut(id)?.take())
    }

    /// Gradient of a leaf, zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
