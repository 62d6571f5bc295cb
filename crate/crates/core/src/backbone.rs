//! Residual convolutional backbone with four output stages.
//!
//! Stem: 7×7 stride-2 convolution, batch norm, ReLU and a 3×3 stride-2 max
//! pool. Each stage is a run of basic blocks; the first block of a stage
//! carries the stage stride and, when the stride or width changes, a 1×1
//! projection on the skip path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_kernels, BatchNorm};
use crate::ops::{conv_out_extent, PoolSpec};
use crate::params::{init_rng, join, ParamKind, Parameterized};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
/// Smallest accepted input height or width.
pub const MIN_INPUT_EXTENT: usize = 32;
const BLOCK_KERNEL: usize = 3;
const STEM_POOL: PoolSpec = PoolSpec {
    kernel: 3,
    stride: 2,
    pad: 1,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub widths: [usize; STAGES],
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_strides: [usize; STAGES],
}

impl BackboneConfig {
    /// ResNet18 widths: 64 → (64, 128, 256, 512).
    pub fn full() -> Self {
        Self::with_widths(64, [64, 128, 256, 512])
    }

    /// Desk-scale widths: 8 → (8, 16, 32, 64).
    pub fn reduced() -> Self {
        Self::with_widths(8, [8, 16, 32, 64])
    }

    pub fn with_widths(stem_channels: usize, widths: [usize; STAGES]) -> Self {
        Self {
            in_channels: 3,
            stem_channels,
            widths,
            blocks_per_stage: 2,
            stem_kernel: 7,
            stem_stride: 2,
            stage_strides: [1, 2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone widths must be positive: {:?}",
                self.widths
            )));
        }
        if self.widths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "backbone widths must be non-decreasing: {:?}",
                self.widths
            )));
        }
        if self.blocks_per_stage == 0
            || self.stem_kernel == 0
            || self.stem_stride == 0
            || self.stage_strides.contains(&0)
        {
            return Err(Error::Config(
                "block counts, kernels and strides must be positive".into(),
            ));
        }
        Ok(())
    }

    fn stem_pad(&self) -> usize {
        self.stem_kernel / 2
    }

    /// `(channels, height, width)` after the stem convolution.
    pub fn stem_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let h = conv_out_extent(height, self.stem_kernel, self.stem_stride, self.stem_pad())?;
        let w = conv_out_extent(width, self.stem_kernel, self.stem_stride, self.stem_pad())?;
        Ok((self.stem_channels, h, w))
    }

    /// `(channels, height, width)` of each stage output, derived with the
    /// same extent arithmetic the convolutions use.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<[(usize, usize, usize); STAGES]> {
        check_input_extent(height, width)?;
        let (_, mut h, mut w) = self.stem_shape(height, width)?;
        h = conv_out_extent(h, STEM_POOL.kernel, STEM_POOL.stride, STEM_POOL.pad)?;
        w = conv_out_extent(w, STEM_POOL.kernel, STEM_POOL.stride, STEM_POOL.pad)?;
        let mut out = [(0, 0, 0); STAGES];
        for (i, slot) in out.iter_mut().enumerate() {
            let s = self.stage_strides[i];
            h = conv_out_extent(h, BLOCK_KERNEL, s, 1)?;
            w = conv_out_extent(w, BLOCK_KERNEL, s, 1)?;
            *slot = (self.widths[i], h, w);
        }
        Ok(out)
    }
}

fn check_input_extent(height: usize, width: usize) -> Result<()> {
    if height < MIN_INPUT_EXTENT || width < MIN_INPUT_EXTENT {
        return Err(Error::Config(format!(
            "input {height}x{width} is smaller than the {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT} minimum"
        )));
    }
    Ok(())
}

/// 1×1 convolution plus norm on the skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub conv: Tensor,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlockParams {
    pub conv1: Tensor,
    pub bn1: BatchNorm,
    pub conv2: Tensor,
    pub bn2: BatchNorm,
    pub proj: Option<Projection>,
}

impl BasicBlockParams {
    pub fn init(inputs: usize, outputs: usize, stride: usize, seed: u64, prefix: &str) -> Self {
        let rng = |name: &str| init_rng(seed, &join(prefix, name));
        let proj = (stride != 1 || inputs != outputs).then(|| Projection {
            conv: conv_kernels(outputs, inputs, 1, &mut rng("proj.conv.w")),
            bn: BatchNorm::new(outputs),
        });
        Self {
            conv1: conv_kernels(outputs, inputs, BLOCK_KERNEL, &mut rng("conv1.w")),
            bn1: BatchNorm::new(outputs),
            conv2: conv_kernels(outputs, outputs, BLOCK_KERNEL, &mut rng("conv2.w")),
            bn2: BatchNorm::new(outputs),
            proj,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.shape()[0]
    }
}

impl Parameterized for BasicBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "conv1.w"), ParamKind::Learnable, &self.conv1);
        self.bn1.visit(&join(prefix, "bn1"), f);
        f(&join(prefix, "conv2.w"), ParamKind::Learnable, &self.conv2);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(p) = &self.proj {
            f(&join(prefix, "proj.conv.w"), ParamKind::Learnable, &p.conv);
            p.bn.visit(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "conv1.w"), ParamKind::Learnable, &mut self.conv1);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        f(&join(prefix, "conv2.w"), ParamKind::Learnable, &mut self.conv2);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some(p) = &mut self.proj {
            f(&join(prefix, "proj.conv.w"), ParamKind::Learnable, &mut p.conv);
            p.bn.visit_mut(&join(prefix, "proj.bn"), f);
        }
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x, stride))))) + skip(x))`.
pub fn basic_block(
    tape: &mut Tape,
    x: Var,
    params: &BasicBlockParams,
    stride: usize,
    prefix: &str,
    mode: Mode,
) -> Result<Var> {
    let channels = tape.shape(x).get(1).copied();
    if channels != Some(params.in_channels()) {
        return Err(Error::dim(format!(
            "basic block {prefix}: input {:?} does not have {} channels",
            tape.shape(x),
            params.in_channels()
        )));
    }
    let k1 = tape.param(&join(prefix, "conv1.w"), &params.conv1);
    let h = tape.conv2d(x, k1, stride, 1)?;
    let h = params.bn1.forward(tape, &join(prefix, "bn1"), h, mode)?;
    let h = tape.relu(h);
    let k2 = tape.param(&join(prefix, "conv2.w"), &params.conv2);
    let h = tape.conv2d(h, k2, 1, 1)?;
    let h = params.bn2.forward(tape, &join(prefix, "bn2"), h, mode)?;

    let skip = match &params.proj {
        Some(p) => {
            let k = tape.param(&join(prefix, "proj.conv.w"), &p.conv);
            let s = tape.conv2d(x, k, stride, 0)?;
            p.bn.forward(tape, &join(prefix, "proj.bn"), s, mode)?
        }
        None => x,
    };
    if tape.shape(skip) != tape.shape(h) {
        return Err(Error::dim(format!(
            "basic block {prefix}: residual {:?} and skip {:?} differ",
            tape.shape(h),
            tape.shape(skip)
        )));
    }
    let sum = tape.add(h, skip)?;
    Ok(tape.relu(sum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stem_conv: Tensor,
    pub stem_bn: BatchNorm,
    /// `stages[i][j]` is block `j + 1` of stage `res{i + 1}`.
    pub stages: Vec<Vec<BasicBlockParams>>,
}

fn stage_prefix(stage: usize, block: usize) -> String {
    format!("res{}.block{}", stage + 1, block + 1)
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stem_conv = conv_kernels(
            config.stem_channels,
            config.in_channels,
            config.stem_kernel,
            &mut init_rng(seed, "stem.conv.w"),
        );
        let mut inputs = config.stem_channels;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, &width) in config.widths.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|j| {
                    let stride = if j == 0 { config.stage_strides[i] } else { 1 };
                    let block_in = if j == 0 { inputs } else { width };
                    BasicBlockParams::init(block_in, width, stride, seed, &stage_prefix(i, j))
                })
                .collect();
            stages.push(blocks);
            inputs = width;
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn: BatchNorm::new(config.stem_channels),
            stages,
        })
    }
}

impl Parameterized for BackboneParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&join(prefix, "stem.conv.w"), ParamKind::Learnable, &self.stem_conv);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, block) in blocks.iter().enumerate() {
                block.visit(&join(prefix, &stage_prefix(i, j)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&join(prefix, "stem.conv.w"), ParamKind::Learnable, &mut self.stem_conv);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, blocks) in self.stages.iter_mut().enumerate() {
            for (j, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &stage_prefix(i, j)), f);
            }
        }
    }
}

/// Runs the stem and the first `depth` stages of `image[B×3×H×W]`,
/// returning each stage's output. Deeper stages are skipped entirely.
pub fn backbone_forward_to(
    tape: &mut Tape,
    image: Var,
    params: &BackboneParams,
    mode: Mode,
    depth: usize,
) -> Result<Vec<Var>> {
    let cfg = &params.config;
    let s = tape.shape(image).to_vec();
    let [_, c, h, w] = s[..] else {
        return Err(Error::dim(format!("backbone: expected [B, C, H, W] image, got {s:?}")));
    };
    if c != cfg.in_channels {
        return Err(Error::dim(format!(
            "backbone: image {s:?} does not have {} channels",
            cfg.in_channels
        )));
    }
    check_input_extent(h, w)?;
    if depth == 0 || depth > STAGES {
        return Err(Error::Usage(format!(
            "backbone depth must be 1..={STAGES}, got {depth}"
        )));
    }

    let k = tape.param("stem.conv.w", &params.stem_conv);
    let x = tape.conv2d(image, k, cfg.stem_stride, cfg.stem_pad())?;
    let x = params.stem_bn.forward(tape, "stem.bn", x, mode)?;
    let x = tape.relu(x);
    let mut x = tape.max_pool2d(x, STEM_POOL)?;

    let mut outputs = Vec::with_capacity(depth);
    for (i, blocks) in params.stages.iter().take(depth).enumerate() {
        for (j, block) in blocks.iter().enumerate() {
            let stride = if j == 0 { cfg.stage_strides[i] } else { 1 };
            x = basic_block(tape, x, block, stride, &stage_prefix(i, j), mode)?;
        }
        outputs.push(x);
    }
    Ok(outputs)
}

/// All four stage outputs.
pub fn backbone_forward(tape: &mut Tape, image: Var, params: &BackboneParams, mode: Mode) -> Result<Vec<Var>> {
    backbone_forward_to(tape, image, params, mode, STAGES)
}
