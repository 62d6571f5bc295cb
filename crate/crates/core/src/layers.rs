//! Parameter-holding building blocks: affine projection, batch
//! normalization and convolution kernels.

use rand::Rng;

use crate::error::Result;
use crate::ops::RunningStats;
use crate::params::{join, ParamKind, Parameterized};
use crate::tape::{Mode, StatUpdate, Tape, Var};
use crate::tensor::Tensor;

/// `y = x·w + b` with `w` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform on `±1/√in` for weights and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            w: Tensor::uniform(&[inputs, outputs], -bound, bound, rng),
            b: Tensor::uniform(&[outputs], -bound, bound, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(prefix, "w"), &self.w);
        let b = tape.param(&join(prefix, "b"), &self.b);
        tape.linear(x, w, b)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "w"), ParamKind::Learnable, &self.w);
        f(&join(prefix, "b"), ParamKind::Learnable, &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "w"), ParamKind::Learnable, &mut self.w);
        f(&join(prefix, "b"), ParamKind::Learnable, &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            mean: Tensor::zeros(&[features]),
            var: Tensor::ones(&[features]),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn running(&self) -> RunningStats {
        RunningStats {
            mean: self.mean.data().to_vec(),
            var: self.var.data().to_vec(),
        }
    }

    /// Normalizes `x`; in training mode the new running statistics are
    /// queued on the tape under `prefix`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(&join(prefix, "gamma"), &self.gamma);
        let beta = tape.param(&join(prefix, "beta"), &self.beta);
        let (y, stats) = tape.batch_norm(x, gamma, beta, &self.running(), mode)?;
        if let Some(s) = stats {
            tape.push_stat_update(StatUpdate {
                key: prefix.to_string(),
                mean: s.mean,
                var: s.var,
            });
        }
        Ok(y)
    }
}

impl Parameterized for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "gamma"), ParamKind::Learnable, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::Learnable, &self.beta);
        f(&join(prefix, "mean"), ParamKind::Buffer, &self.mean);
        f(&join(prefix, "var"), ParamKind::Buffer, &self.var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "gamma"), ParamKind::Learnable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Learnable, &mut self.beta);
        f(&join(prefix, "mean"), ParamKind::Buffer, &mut self.mean);
        f(&join(prefix, "var"), ParamKind::Buffer, &mut self.var);
    }
}

/// Kernels `[out × in × k × k]`, uniform on `±√(6/fan_in)`.
pub fn conv_kernels<R: Rng + ?Sized>(outputs: usize, inputs: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (inputs * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::uniform(&[outputs, inputs, k, k], -bound, bound, rng)
}
