//! SGD with momentum, the step learning-rate schedule, and the training
//! and evaluation loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;

use crate::data::{
    images_to_tensor, random_crop, random_hflip, resize_bilinear, Dataset, LabeledImage, Pipeline, RgbImage,
};
use crate::error::{Error, Result};
use crate::network::{argmax, infer_logits, multer_forward, Model};
use crate::params::{apply_stat_updates, init_rng, ParamKind, Parameterized};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    /// Epochs per learning-rate plateau.
    pub decay_every: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            decay_factor: 0.1,
            decay_every: 10,
            momentum: 0.9,
            epochs: 30,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay interval must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below 2; batch statistics need two samples",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    ///
    /// The decay is applied once per completed plateau rather than through
    /// `powi`, so 0.01 decays to exactly 0.001 and 0.0001.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (0..epoch / self.decay_every).fold(self.base_lr, |lr, _| lr * self.decay_factor)
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
}

/// Classical momentum: `v = momentum·v + g`, then `p -= lr·v`. Buffers are
/// untouched; a learnable parameter missing from `grads` gets a zero
/// gradient.
pub fn sgd_momentum_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut problem = None;
    params.visit_mut("", &mut |name, kind, p| {
        if kind != ParamKind::Learnable || problem.is_some() {
            return;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if v.shape() != p.shape() {
            problem = Some(format!(
                "velocity for {name} has shape {:?}, parameter {:?}",
                v.shape(),
                p.shape()
            ));
            return;
        }
        match grads.get(name) {
            Some(g) if g.shape() != p.shape() => {
                problem = Some(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            Some(g) => {
                for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                    *vi = momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
            None => {
                for (vi, pi) in v.data_mut().iter_mut().zip(p.data_mut()) {
                    *vi *= momentum;
                    *pi -= lr * *vi;
                }
            }
        }
    });
    match problem {
        Some(p) => Err(Error::dim(p)),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `labels` under `logits[B×n]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// Zero-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_acc";

/// Writes the per-epoch log as CSV with fixed float formatting.
pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{:.6e},{:.8},{:.6},{:.6}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.eval_acc
        )?;
    }
    Ok(())
}

/// Batch boundaries over `n` samples. The last batch is kept even when
/// short, but a trailing single sample joins the previous batch because
/// batch statistics need at least two.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

fn check_dataset(model: &Model, samples: &[LabeledImage], split: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let n = model.config().classes;
    if let Some(s) = samples.iter().find(|s| s.label >= n) {
        return Err(Error::Data(format!(
            "{} has label {} but the model has {n} classes",
            s.id, s.label
        )));
    }
    Ok(())
}

fn eval_views(samples: &[LabeledImage], pipeline: &Pipeline) -> Result<Vec<RgbImage>> {
    samples.iter().map(|s| pipeline.eval_view(&s.pixels)).collect()
}

/// Fraction of `views` classified as `labels`, in eval mode.
fn accuracy(model: &Model, views: &[RgbImage], labels: &[usize], batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for r in batch_ranges(views.len(), batch_size) {
        let batch: Vec<&RgbImage> = views[r.clone()].iter().collect();
        let logits = infer_logits(&model.params, &images_to_tensor(&batch)?)?;
        let n = model.config().classes;
        correct += logits
            .data()
            .chunks(n)
            .zip(&labels[r])
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(correct as f64 / views.len() as f64)
}

/// Test-split accuracy with eval-mode normalization and center crops.
pub fn evaluate(model: &Model, samples: &[LabeledImage], pipeline: &Pipeline, batch_size: usize) -> Result<f64> {
    check_dataset(model, samples, "evaluation")?;
    let views = eval_views(samples, pipeline)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy(model, &views, &labels, batch_size)
}

/// One optimizer step on a batch; returns the batch loss and the number of
/// correct training predictions.
pub fn train_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let logits = multer_forward(&mut tape, x, &model.params, Mode::Train)?;
    let loss = cross_entropy_loss(&mut tape, logits, labels)?;
    let n = model.config().classes;
    let correct = tape
        .value(logits)
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let loss_value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = tape.param_grads();
    sgd_momentum_step(&mut model.params, &grads, state, lr, momentum)?;
    apply_stat_updates(&mut model.params, tape.take_stat_updates());
    Ok((loss_value, correct))
}

/// Trains `model` in place and returns one metrics row per epoch.
///
/// Every epoch reshuffles the training split and redraws crops and flips
/// from a single stream seeded by `cfg.seed`, so a run is reproducible bit
/// for bit.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainingConfig,
    pipeline: &Pipeline,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    pipeline.validate()?;
    if dataset.classes() != model.config().classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            dataset.classes(),
            model.config().classes
        )));
    }
    check_dataset(model, &dataset.train, "train")?;
    check_dataset(model, &dataset.test, "test")?;
    if dataset.train.len() < 2 {
        return Err(Error::Data(
            "training needs at least two samples for batch statistics".into(),
        ));
    }

    let resized: Vec<RgbImage> = dataset
        .train
        .iter()
        .map(|s| resize_bilinear(&s.pixels, pipeline.resize, pipeline.resize))
        .collect();
    let test_views = eval_views(&dataset.test, pipeline)?;
    let test_labels: Vec<usize> = dataset.test.iter().map(|s| s.label).collect();

    let mut rng = init_rng(cfg.seed, "train");
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for r in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[r];
            let views = idx
                .iter()
                .map(|&i| {
                    let c = random_crop(&resized[i], pipeline.crop, &mut rng)?;
                    Ok(random_hflip(&c, pipeline.flip_prob, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&RgbImage> = views.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.train[i].label).collect();
            let (loss, c) = train_step(model, &images_to_tensor(&refs)?, &labels, &mut state, lr, cfg.momentum)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged in epoch {epoch}")));
            }
            loss_sum += loss * idx.len() as f64;
            correct += c;
        }
        let n = order.len() as f64;
        log.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            eval_acc: accuracy(model, &test_views, &test_labels, cfg.batch_size)?,
        });
    }
    Ok(log)
}
