use crate::error::{Error, Result};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Added to the variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// Blends in one batch's statistics; the batch variance is the unbiased
    /// estimate over `count` values.
    pub fn updated(&self, batch_mean: &[f64], batch_var_biased: &[f64], count: usize) -> Self {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let blend = |old: &[f64], new: &[f64], scale: f64| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n * scale)
                .collect()
        };
        Self {
            mean: blend(&self.mean, batch_mean, 1.0),
            var: blend(&self.var, batch_var_biased, unbias),
        }
    }
}

/// `(batch, features, positions)` view of a rank-2 `[B×F]` or rank-4
/// `[B×F×H×W]` tensor.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, f] => Ok((*b, *f, 1)),
        [b, f, h, w] => Ok((*b, *f, h * w)),
        _ => Err(Error::dim(format!("batch_norm: expected rank 2 or 4, got {shape:?}"))),
    }
}

impl Tape {
    /// Batch normalization over every axis except the feature axis (axis 1).
    ///
    /// In [`Mode::Train`] the batch statistics are used and the updated
    /// running statistics are returned; in [`Mode::Eval`] `running` is used
    /// and nothing is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats>)> {
        let shape = self.shape(x).to_vec();
        let (batch, feats, positions) = layout(&shape)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [feats] {
                return Err(Error::dim(format!(
                    "batch_norm: {name} {:?} does not match {feats} features",
                    self.shape(v)
                )));
            }
        }
        if running.mean.len() != feats || running.var.len() != feats {
            return Err(Error::dim(format!(
                "batch_norm: running statistics do not match {feats} features"
            )));
        }
        let count = batch * positions;
        if mode == Mode::Train && batch < 2 && positions == 1 {
            return Err(Error::Config(format!(
                "batch_norm in training mode needs a batch of at least 2, got {batch}"
            )));
        }

        let xs = self.value(x).data();
        let plane = move |b: usize, f: usize| (b * feats + f) * positions;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; feats];
                let mut var = vec![0.0; feats];
                for f in 0..feats {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xs[plane(b, f)..][..positions].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += xs[plane(b, f)..][..positions]
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>();
                    }
                    mean[f] = m;
                    var[f] = v / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..batch {
            for f in 0..feats {
                let at = plane(b, f);
                for i in at..at + positions {
                    xhat[i] = (xs[i] - mean[f]) * inv_std[f];
                    out[i] = g[f] * xhat[i] + bt[f];
                }
            }
        }
        let new_stats = (mode == Mode::Train).then(|| running.updated(&mean, &var, count));
        let out = Tensor::from_parts(shape, out);
        let y = self.custom("batch_norm", &[x, gamma, beta], out, move |ctx| {
            let gamma = ctx.inputs[1].data();
            let gy = ctx.grad;
            let mut ggamma = vec![0.0; feats];
            let mut gbeta = vec![0.0; feats];
            for b in 0..batch {
                for f in 0..feats {
                    let at = plane(b, f);
                    for i in at..at + positions {
                        ggamma[f] += gy[i] * xhat[i];
                        gbeta[f] += gy[i];
                    }
                }
            }
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![0.0; gy.len()];
                for f in 0..feats {
                    let scale = gamma[f] * inv_std[f];
                    match mode {
                        Mode::Eval => {
                            for b in 0..batch {
                                let at = plane(b, f);
                                for i in at..at + positions {
                                    gx[i] = gy[i] * scale;
                                }
                            }
                        }
                        Mode::Train => {
                            // d/dx of (x - mean)/std through both batch statistics
                            let n = count as f64;
                            let (sum_g, sum_gx) = (gbeta[f], ggamma[f]);
                            for b in 0..batch {
                                let at = plane(b, f);
                                for i in at..at + positions {
                                    gx[i] = scale * (gy[i] - sum_g / n - xhat[i] * sum_gx / n);
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, ctx.needs(1).then_some(ggamma), ctx.needs(2).then_some(gbeta)]
        });
        Ok((y, new_stats))
    }
}
