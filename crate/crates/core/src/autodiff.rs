//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to tracked values in creation
//! order. [`Tape::backward`] walks the records in reverse, exactly once each,
//! accumulating gradients additively when a value feeds several consumers.
//!
//! Values are reference counted, so a [`Var`] can be cloned freely. Vars
//! created while the tape is in no-grad mode (or from constants only) carry
//! no id and record nothing; that is the inference path.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Computes input gradients from the output gradient. `needs[i]` tells
/// whether input `i` is tracked; entries for untracked inputs may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Element> Var<T> {
    /// Untracked value, usable with any tape.
    pub fn constant(t: Tensor<T>) -> Self {
        Self { value: Arc::new(t), id: None }
    }

    pub fn from_arc(value: Arc<Tensor<T>>) -> Self {
        Self { value, id: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> &Arc<Tensor<T>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that never records; every op runs forward only.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that requires a gradient (when the tape records at all).
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        self.leaf_arc(Arc::new(t))
    }

    pub fn leaf_arc(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.grad_enabled {
            return Var { value, id: None };
        }
        let id = self.push(Node { inputs: Vec::new(), backward: None, shape: value.shape().to_vec() });
        Var { value, id: Some(id) }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records a primitive application. The output is tracked iff the tape
    /// records and at least one input is tracked; otherwise `backward` is
    /// dropped unused.
    pub fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Arc::new(value);
        if !self.grad_enabled || inputs.iter().all(|v| v.id.is_none()) {
            return Var { value, id: None };
        }
        let id = self.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            shape: value.shape().to_vec(),
        });
        Var { value, id: Some(id) }
    }

    /// Reverse sweep from a single-element loss. Returns gradients for every
    /// tracked leaf the loss depends on.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", loss.shape()));
        }
        let Some(root) = loss.id else {
            return contract_err("loss is not tracked on this tape");
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        let mut leaf_grads = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                leaf_grads.insert(i, g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(j), Some(ig)) = (slot, ig) else { continue };
                debug_assert_eq!(ig.shape(), &nodes[*j].shape[..]);
                match &mut grads[*j] {
                    Some(acc) => acc.add_assign(&ig),
                    empty => *empty = Some(ig),
                }
            }
        }
        Ok(Gradients { by_id: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.by_id.get(&id))
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        v.id.and_then(|id| self.by_id.remove(&id))
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Worst element of a gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// The relative error per element is
/// `|analytic - numeric| / max(floor, |analytic| + |numeric|)` with
/// `floor = max(1e-7, 1e-6 * max |analytic|)`: entries a millionth of the
/// largest gradient or smaller are compared absolutely, so exact zeros are
/// not judged against finite-difference roundoff.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<_> = perturbed.iter().map(|x| Var::constant(x.clone())).collect();
        Ok(f(&t, &vs)?.value().item())
    };

    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    let largest = analytic.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * largest).max(1e-7);
    let mut report = GradCheckReport { max_rel_error: 0.0, input: 0, index: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, analytic) in analytic.iter().enumerate() {
        for idx in 0..inputs[k].numel() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            if a.is_nan() || numeric.is_nan() {
                return Err(Error::Numeric(format!("NaN gradient at input {k}, element {idx}")));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report = GradCheckReport { max_rel_error: rel, input: k, index: idx };
            }
        }
    }
    Ok(report)
}
