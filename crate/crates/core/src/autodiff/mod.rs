//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one node per operation whose inputs track gradients.
//! Nodes are appended in evaluation order, so insertion order is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//! Operations on untracked inputs produce untracked [`Var`]s and leave the
//! tape untouched, which keeps pure inference free of bookkeeping.

mod gradcheck;
mod ops;

use std::collections::BTreeMap;
use std::rc::Rc;

pub use gradcheck::{check_gradients, check_gradients_with, fd_gradcheck, CheckReport, Stencil, Worst};

use crate::error::ShapeError;
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

/// A tensor value plus its (optional) position on a tape.
#[derive(Debug)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

impl<T: Scalar> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(t: Tensor<T>) -> Self {
        Var {
            value: Rc::new(t),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Take the value out, cloning only if other handles still share it.
    pub fn into_tensor(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

struct Node<T> {
    name: &'static str,
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    shape: Shape,
}

/// Per-layer multiply-accumulate and output-element tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCount {
    pub macs: u64,
    pub acts: u64,
}

/// Accumulates counts under the currently active scope label.
#[derive(Debug, Clone, Default)]
pub struct MacCounter {
    scope: String,
    rows: BTreeMap<String, LayerCount>,
}

impl MacCounter {
    pub fn rows(&self) -> &BTreeMap<String, LayerCount> {
        &self.rows
    }

    pub fn total(&self) -> LayerCount {
        self.rows.values().fold(LayerCount::default(), |a, r| LayerCount {
            macs: a.macs + r.macs,
            acts: a.acts + r.acts,
        })
    }

    /// Sum of rows whose label starts with `prefix`.
    pub fn total_under(&self, prefix: &str) -> LayerCount {
        self.rows
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .fold(LayerCount::default(), |a, (_, r)| LayerCount {
                macs: a.macs + r.macs,
                acts: a.acts + r.acts,
            })
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    counter: Option<MacCounter>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            counter: None,
        }
    }

    /// A tape that also tallies MACs and output elements per scope.
    pub fn instrumented() -> Self {
        Tape {
            counter: Some(MacCounter::default()),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.name)
    }

    /// Register a leaf that will receive a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var<T> {
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: "leaf",
            inputs: Vec::new(),
            backward: None,
            shape: t.shape(),
        });
        self.grads.push(None);
        Var {
            value: Rc::new(t),
            node: Some(id),
        }
    }

    pub fn set_scope(&mut self, scope: impl Into<String>) {
        if let Some(c) = self.counter.as_mut() {
            c.scope = scope.into();
        }
    }

    pub fn counter(&self) -> Option<&MacCounter> {
        self.counter.as_ref()
    }

    pub fn take_counter(&mut self) -> Option<MacCounter> {
        self.counter.take()
    }

    pub(crate) fn count(&mut self, macs: u64, acts: u64) {
        if let Some(c) = self.counter.as_mut() {
            let row = c.rows.entry(c.scope.clone()).or_default();
            row.macs += macs;
            row.acts += acts;
        }
    }

    /// Append a node for `out` if any input is tracked.
    ///
    /// `backward` receives the output gradient and a mask of which inputs
    /// need a gradient, and returns one entry per input.
    pub(crate) fn record<F>(
        &mut self,
        name: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: F,
    ) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(out);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            name,
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
            shape: out.shape(),
        });
        self.grads.push(None);
        Var {
            value: Rc::new(out),
            node: Some(id),
        }
    }

    /// Propagate d(loss)/d(node) to every tracked node, seeding with 1.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<(), ShapeError> {
        if loss.shape() != Shape::scalar() {
            return Err(ShapeError::invalid(
                "backward",
                format!("loss must be (1,1,1,1), got {:?}", loss.shape().dims()),
            ));
        }
        let root = loss
            .node
            .ok_or_else(|| ShapeError::invalid("backward", "loss is not on the tape"))?;
        self.grads[root] = Some(Tensor::scalar(T::one()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(f) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
            let input_grads = f(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.name);
            let inputs = node.inputs.clone();
            for (src, gi) in inputs.into_iter().zip(input_grads) {
                let (Some(src), Some(gi)) = (src, gi) else {
                    continue;
                };
                debug_assert_eq!(gi.shape(), self.nodes[src].shape, "{}", node.name);
                match self.grads[src].as_mut() {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, &b)| *a += b),
                    None => self.grads[src] = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Like [`Tape::grad`], but zeros when the leaf did not influence the loss.
    pub fn grad_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
