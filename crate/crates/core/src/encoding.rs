//! Learnable encoding module.
//!
//! Two branches read the same `[B×D×H×W]` feature map:
//!
//! * local: the map is viewed as `N = H·W` descriptors of dimension `D`,
//!   softly assigned to `K` learnable codewords and aggregated into
//!   `K×D` residual statistics, then normalized and projected to
//!   `branch_dim` (FC1);
//! * global: channel means over all positions, normalized and projected to
//!   `branch_dim` (FC2).
//!
//! The branches are fused by their outer product (`branch_dim²` values) and
//! projected to `C` outputs (FC3). Nothing in the output shape depends on
//! `H` or `W`.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear};
use crate::params::{init_rng, join, ParamKind, Parameterized};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BRANCH_DIM: usize = 64;
pub const DEFAULT_OUT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LemConfig {
    /// Channel dimension `D` of the incoming feature map.
    pub channels: usize,
    /// Number of codewords `K`.
    pub codewords: usize,
    pub branch_dim: usize,
    /// Output length `C`.
    pub out_dim: usize,
}

impl LemConfig {
    pub fn new(channels: usize, codewords: usize) -> Self {
        Self {
            channels,
            codewords,
            branch_dim: DEFAULT_BRANCH_DIM,
            out_dim: DEFAULT_OUT_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.codewords == 0 || self.branch_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("encoding dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        self.codewords * self.channels
    }

    pub fn bilinear_dim(&self) -> usize {
        self.branch_dim * self.branch_dim
    }
}

/// `K` codewords of dimension `D` with one smoothing factor each.
///
/// Smoothing factors are stored unconstrained; the effective factor is
/// `softplus(raw) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codewords: Tensor,
    pub smoothing: Tensor,
}

impl Codebook {
    pub fn new(codewords: Tensor, smoothing: Tensor) -> Result<Self> {
        match (codewords.shape(), smoothing.shape()) {
            ([k, _], [ks]) if k == ks => Ok(Self { codewords, smoothing }),
            (c, s) => Err(Error::dim(format!("codebook: codewords {c:?} with smoothing {s:?}"))),
        }
    }

    /// Codewords uniform on `±1/√K`, raw smoothing uniform on `[0, 1)`.
    pub fn init(codewords: usize, dim: usize, seed: u64, prefix: &str) -> Self {
        let bound = 1.0 / (codewords as f64).sqrt();
        Self {
            codewords: Tensor::uniform(
                &[codewords, dim],
                -bound,
                bound,
                &mut init_rng(seed, &join(prefix, "codewords")),
            ),
            smoothing: Tensor::uniform(&[codewords], 0.0, 1.0, &mut init_rng(seed, &join(prefix, "smoothing"))),
        }
    }

    pub fn len(&self) -> usize {
        self.codewords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codewords.shape()[1]
    }

    fn bind(&self, tape: &mut Tape, prefix: &str) -> (Var, Var) {
        (
            tape.param(&join(prefix, "codewords"), &self.codewords),
            tape.param(&join(prefix, "smoothing"), &self.smoothing),
        )
    }

    /// Assignment weights for plain descriptors `[B×N×D]`, without recording
    /// gradients.
    pub fn assignments(&self, descriptors: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(descriptors.clone());
        let c = tape.constant(self.codewords.clone());
        let s = tape.constant(self.smoothing.clone());
        let a = assign_weights(&mut tape, x, c, s)?;
        Ok(tape.value(a).clone())
    }
}

impl Parameterized for Codebook {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "codewords"), ParamKind::Learnable, &self.codewords);
        f(&join(prefix, "smoothing"), ParamKind::Learnable, &self.smoothing);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "codewords"), ParamKind::Learnable, &mut self.codewords);
        f(&join(prefix, "smoothing"), ParamKind::Learnable, &mut self.smoothing);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemParams {
    pub codebook: Codebook,
    pub bn1: BatchNorm,
    pub fc1: Linear,
    pub bn2: BatchNorm,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl LemParams {
    pub fn init(cfg: &LemConfig, seed: u64, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let rng = |name: &str| init_rng(seed, &join(prefix, name));
        Ok(Self {
            codebook: Codebook::init(cfg.codewords, cfg.channels, seed, prefix),
            bn1: BatchNorm::new(cfg.encoding_dim()),
            fc1: Linear::init(cfg.encoding_dim(), cfg.branch_dim, &mut rng("fc1")),
            bn2: BatchNorm::new(cfg.channels),
            fc2: Linear::init(cfg.channels, cfg.branch_dim, &mut rng("fc2")),
            fc3: Linear::init(cfg.bilinear_dim(), cfg.out_dim, &mut rng("fc3")),
        })
    }

    pub fn config(&self) -> LemConfig {
        LemConfig {
            channels: self.codebook.dim(),
            codewords: self.codebook.len(),
            branch_dim: self.fc1.outputs(),
            out_dim: self.fc3.outputs(),
        }
    }
}

impl Parameterized for LemParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.codebook.visit(prefix, f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.fc3.visit(&join(prefix, "fc3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.codebook.visit_mut(prefix, f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.fc3.visit_mut(&join(prefix, "fc3"), f);
    }
}

/// `[B×D×H×W]` to `[B×(H·W)×D]`.
pub fn reshape_spatial(tape: &mut Tape, fmap: Var) -> Result<Var> {
    tape.channels_last(fmap)
}

/// `a[b,i,k] = softmax_k(−softplus(s_k)·‖x_i − c_k‖²)`.
pub fn assign_weights(tape: &mut Tape, descriptors: Var, codewords: Var, smoothing_raw: Var) -> Result<Var> {
    let dist = tape.pairwise_sq_dist(descriptors, codewords)?;
    let s = tape.softplus(smoothing_raw);
    let scaled = tape.mul_last(dist, s)?;
    let logits = tape.scale(scaled, -1.0);
    tape.softmax(logits)
}

/// Assignment-weighted residuals, `[B×K×D]`.
pub fn aggregate(tape: &mut Tape, descriptors: Var, codewords: Var, assignments: Var) -> Result<Var> {
    tape.aggregate(descriptors, codewords, assignments)
}

/// Orderless residual encoding of a feature map, flattened to `[B×(K·D)]`
/// with codeword-major layout.
pub fn encode(tape: &mut Tape, fmap: Var, codebook: &Codebook, prefix: &str) -> Result<Var> {
    let fshape = tape.shape(fmap).to_vec();
    if fshape.len() != 4 || fshape[1] != codebook.dim() {
        return Err(Error::dim(format!(
            "encode: feature map {fshape:?} does not have {} channels",
            codebook.dim()
        )));
    }
    let x = reshape_spatial(tape, fmap)?;
    let (c, s) = codebook.bind(tape, prefix);
    let a = assign_weights(tape, x, c, s)?;
    let e = aggregate(tape, x, c, a)?;
    tape.reshape(e, &[fshape[0], codebook.len() * codebook.dim()])
}

/// Full module: `fc3(outer(fc1(bn1(encode)), fc2(bn2(avg_pool))))`, `[B×C]`.
pub fn lem_forward(tape: &mut Tape, fmap: Var, params: &LemParams, prefix: &str, mode: Mode) -> Result<Var> {
    let encoded = encode(tape, fmap, &params.codebook, prefix)?;
    let local = params.bn1.forward(tape, &join(prefix, "bn1"), encoded, mode)?;
    let local = params.fc1.forward(tape, &join(prefix, "fc1"), local)?;

    let pooled = tape.global_avg_pool(fmap)?;
    let global = params.bn2.forward(tape, &join(prefix, "bn2"), pooled, mode)?;
    let global = params.fc2.forward(tape, &join(prefix, "fc2"), global)?;

    let fused = tape.outer_product(local, global)?;
    params.fc3.forward(tape, &join(prefix, "fc3"), fused)
}
