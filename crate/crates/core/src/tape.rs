//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its output value and, when any
//! input requires a gradient, a closure that maps the output gradient to
//! input gradients. Nodes are only ever appended, so the node index order is
//! a topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether normalization layers use batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a backward rule sees: input values, the output value and the
/// gradient flowing into the output.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// True when input `i` participates in differentiation; rules may skip
    /// computing gradients for inputs where this is false.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

/// Running-statistics update produced by a training-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub key: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: &'static str,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    stat_updates: Vec<StatUpdate>,
    grad_enabled: bool,
    branches: Option<Vec<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stat_updates: Vec::new(),
            grad_enabled: true,
            branches: None,
        }
    }

    /// A tape that never records backward rules. Used for inference.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Makes piecewise operations (ReLU, max pooling) log which branch each
    /// element took, so callers can tell whether two evaluations lie on the
    /// same smooth piece.
    pub fn record_branches(mut self) -> Self {
        self.branches = Some(Vec::new());
        self
    }

    /// Branch choices logged so far, or `None` when recording is off.
    pub fn branches(&self) -> Option<&[usize]> {
        self.branches.as_deref()
    }

    pub(crate) fn records_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn log_branches(&mut self, choices: impl IntoIterator<Item = usize>) {
        if let Some(log) = self.branches.as_mut() {
            log.extend(choices);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It takes part in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let flag = tensor.requires_grad() && self.grad_enabled;
        tensor.set_requires_grad(flag);
        tensor.set_grad(None).expect("clearing a gradient cannot fail");
        self.nodes.push(Node {
            value: tensor,
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, name: &str, tensor: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(tensor.clone().with_requires_grad(true));
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter, keyed by name. Parameters the
    /// loss does not depend on are absent.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| {
                let node = &self.nodes[v.0].value;
                node.grad()
                    .map(|g| (name.clone(), Tensor::from_parts(node.shape().to_vec(), g.to_vec())))
            })
            .collect()
    }

    pub fn push_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// This is the extension point for operations defined outside the
    /// crate; the built-in operations use it too.
    pub fn custom<F>(&mut self, op: &'static str, inputs: &[Var], output: Tensor, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let track = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        let output = output.with_requires_grad(track);
        self.nodes.push(Node {
            value: output,
            op,
            inputs: inputs.to_vec(),
            backward: if track { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Every node that requires a gradient
    /// receives one (zeros when the loss does not depend on it); gradients
    /// from multiple consumers are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].as_ref() else { continue };
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: g,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].value.requires_grad())
                    .collect(),
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "rule for {}", node.op);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[input.0].value.len(), "rule for {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(Some(g))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_tape_records_no_rules() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        assert!(!tape.requires_grad(x));
        let s = tape.sum(x);
        assert!(!tape.requires_grad(s));
    }

    #[test]
    fn binding_a_param_twice_shares_the_node() {
        let mut tape = Tape::new();
        let w = Tensor::ones(&[3]);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        let y = tape.leaf(Tensor::ones(&[2]).with_requires_grad(true));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
    }
}
