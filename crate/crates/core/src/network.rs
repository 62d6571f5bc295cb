//! Multi-level assembly: one encoding module per selected backbone stage,
//! concatenated in ascending level order and classified by one affine layer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward_to, BackboneConfig, BackboneParams, STAGES};
use crate::encoding::{lem_forward, LemConfig, LemParams, DEFAULT_BRANCH_DIM};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{init_rng, join, ParamKind, Parameterized};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Nonempty subset of the backbone levels `{1, 2, 3, 4}`.
///
/// Stored as a bitmask, so iteration is always ascending regardless of the
/// order levels were written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LevelSet(u8);

impl LevelSet {
    pub fn new(levels: &[u8]) -> Result<Self> {
        let mut mask = 0u8;
        for &l in levels {
            if !(1..=STAGES as u8).contains(&l) {
                return Err(Error::Usage(format!("level {l} is outside 1..={STAGES}")));
            }
            mask |= 1 << (l - 1);
        }
        if mask == 0 {
            return Err(Error::Usage("level set is empty".into()));
        }
        Ok(Self(mask))
    }

    pub fn all() -> Self {
        Self(0b1111)
    }

    pub fn contains(&self, level: u8) -> bool {
        (1..=STAGES as u8).contains(&level) && self.0 & (1 << (level - 1)) != 0
    }

    /// Levels in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=STAGES as u8).filter(|&l| self.contains(l))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn deepest(&self) -> u8 {
        self.iter().last().expect("level sets are nonempty")
    }
}

impl FromStr for LevelSet {
    type Err = Error;

    /// Accepts `1,2,4` or the report notation `L=1,2,4`.
    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().strip_prefix("L=").unwrap_or(s.trim());
        let levels = body
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Usage(format!("cannot parse level {part:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&levels)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|l| l.to_string()).collect();
        write!(f, "L={}", parts.join(","))
    }
}

impl TryFrom<Vec<u8>> for LevelSet {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<LevelSet> for Vec<u8> {
    fn from(l: LevelSet) -> Self {
        l.iter().collect()
    }
}

/// The ten level-selection schemes of the ablation report, in report order.
pub const ABLATION_SCHEMES: [&[u8]; 10] = [
    &[1],
    &[2],
    &[3],
    &[4],
    &[1, 2],
    &[3, 4],
    &[1, 4],
    &[1, 2, 3],
    &[2, 3, 4],
    &[1, 2, 3, 4],
];

pub fn ablation_schemes() -> Vec<LevelSet> {
    ABLATION_SCHEMES
        .iter()
        .map(|l| LevelSet::new(l).expect("static schemes are valid"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulterConfig {
    pub backbone: BackboneConfig,
    pub levels: LevelSet,
    /// Codewords `K`, shared by every level.
    pub codewords: usize,
    pub branch_dim: usize,
    /// Per-level output length `C`.
    pub out_dim: usize,
    pub classes: usize,
}

impl MulterConfig {
    /// ResNet18 widths, `K = 8`, `C = 128`, all four levels.
    pub fn full(classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::full(),
            levels: LevelSet::all(),
            codewords: 8,
            branch_dim: DEFAULT_BRANCH_DIM,
            out_dim: 128,
            classes,
        }
    }

    /// Reduced widths, `K = 4`, `C = 32`, all four levels.
    pub fn desk(classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::reduced(),
            codewords: 4,
            out_dim: 32,
            ..Self::full(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        for level in self.levels.iter() {
            self.lem_config(level).validate()?;
        }
        Ok(())
    }

    pub fn lem_config(&self, level: u8) -> LemConfig {
        LemConfig {
            channels: self.backbone.widths[usize::from(level) - 1],
            codewords: self.codewords,
            branch_dim: self.branch_dim,
            out_dim: self.out_dim,
        }
    }

    /// Length of the concatenated pre-classifier feature: `|L|·C`.
    pub fn feature_dim(&self) -> usize {
        self.levels.len() * self.out_dim
    }

    /// Shapes through the whole network for an `height×width` input,
    /// computed without running it.
    pub fn trace(&self, height: usize, width: usize) -> Result<ArchitectureTrace> {
        self.validate()?;
        let stages = self.backbone.stage_shapes(height, width)?;
        let lems = self
            .levels
            .iter()
            .map(|level| {
                let cfg = self.lem_config(level);
                let (d, h, w) = stages[usize::from(level) - 1];
                LemTrace {
                    level,
                    input: (h, w, d),
                    descriptors: (h * w, d),
                    encoding: (cfg.codewords, d),
                    local_projection: cfg.branch_dim,
                    pooled: d,
                    global_projection: cfg.branch_dim,
                    bilinear: cfg.bilinear_dim(),
                    output: cfg.out_dim,
                }
            })
            .collect();
        Ok(ArchitectureTrace {
            stem: self.backbone.stem_shape(height, width)?,
            stages,
            lems,
            classifier_in: self.feature_dim(),
            classes: self.classes,
        })
    }
}

/// Dimensions of one encoding module for a given input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LemTrace {
    pub level: u8,
    /// `(H, W, D)`.
    pub input: (usize, usize, usize),
    /// `(N = H·W, D)`.
    pub descriptors: (usize, usize),
    /// `(K, D)`.
    pub encoding: (usize, usize),
    pub local_projection: usize,
    pub pooled: usize,
    pub global_projection: usize,
    pub bilinear: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureTrace {
    /// `(C, H, W)` after the stem convolution.
    pub stem: (usize, usize, usize),
    /// `(C, H, W)` of each backbone stage.
    pub stages: [(usize, usize, usize); STAGES],
    pub lems: Vec<LemTrace>,
    pub classifier_in: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulterParams {
    pub config: MulterConfig,
    pub backbone: BackboneParams,
    pub lems: BTreeMap<u8, LemParams>,
    pub classifier: Linear,
}

fn lem_prefix(level: u8) -> String {
    format!("lem{level}")
}

impl MulterParams {
    /// Every tensor's initial value depends only on `seed` and its name.
    pub fn init(config: &MulterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(&config.backbone, seed)?;
        let lems = config
            .levels
            .iter()
            .map(|level| {
                Ok((
                    level,
                    LemParams::init(&config.lem_config(level), seed, &lem_prefix(level))?,
                ))
            })
            .collect::<Result<_>>()?;
        let classifier = Linear::init(config.feature_dim(), config.classes, &mut init_rng(seed, "classifier"));
        Ok(Self {
            config: config.clone(),
            backbone,
            lems,
            classifier,
        })
    }
}

impl Parameterized for MulterParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        self.backbone.visit(prefix, f);
        for (&level, lem) in &self.lems {
            lem.visit(&join(prefix, &lem_prefix(level)), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        self.backbone.visit_mut(prefix, f);
        for (&level, lem) in self.lems.iter_mut() {
            lem.visit_mut(&join(prefix, &lem_prefix(level)), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Concatenated per-level encodings, `[B × |L|·C]`.
pub fn multer_features(tape: &mut Tape, image: Var, params: &MulterParams, mode: Mode) -> Result<Var> {
    let levels = params.config.levels;
    let stages = backbone_forward_to(tape, image, &params.backbone, mode, usize::from(levels.deepest()))?;
    let mut parts = Vec::with_capacity(levels.len());
    for level in levels.iter() {
        let lem = params
            .lems
            .get(&level)
            .ok_or_else(|| Error::Config(format!("no encoding parameters for level {level}")))?;
        let fmap = stages[usize::from(level) - 1];
        parts.push(lem_forward(tape, fmap, lem, &lem_prefix(level), mode)?);
    }
    tape.concat(&parts, 1)
}

/// Class logits `[B × n]`.
pub fn multer_forward(tape: &mut Tape, image: Var, params: &MulterParams, mode: Mode) -> Result<Var> {
    let features = multer_features(tape, image, params, mode)?;
    params.classifier.forward(tape, "classifier", features)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Eval-mode logits for a `[B×3×H×W]` batch without recording gradients.
pub fn infer_logits(params: &MulterParams, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(images.clone());
    let logits = multer_forward(&mut tape, x, params, Mode::Eval)?;
    Ok(tape.value(logits).clone())
}

/// Predicted class of every image in the batch.
pub fn predict(params: &MulterParams, images: &Tensor) -> Result<Vec<usize>> {
    let logits = infer_logits(params, images)?;
    let n = params.config.classes;
    Ok(logits.data().chunks(n).map(argmax).collect())
}

/// Trained parameters plus everything needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: MulterParams,
    pub class_names: Vec<String>,
    /// Free-form provenance (data recipe, preprocessing) carried in the
    /// model file header.
    pub meta: BTreeMap<String, String>,
}

impl Model {
    pub fn new(params: MulterParams, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != params.config.classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                class_names.len(),
                params.config.classes
            )));
        }
        Ok(Self {
            params,
            class_names,
            meta: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &MulterConfig {
        &self.params.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_set_parsing_and_display() {
        let l: LevelSet = "4,1".parse().unwrap();
        assert_eq!(l.to_string(), "L=1,4");
        assert_eq!("L=1,4".parse::<LevelSet>().unwrap(), l);
        assert_eq!(l.iter().collect::<Vec<_>>(), vec![1, 4]);
        assert!("5".parse::<LevelSet>().is_err());
        assert!("0".parse::<LevelSet>().is_err());
        assert!("".parse::<LevelSet>().is_err());
        assert!("1,x".parse::<LevelSet>().is_err());
    }

    #[test]
    fn ablation_schemes_in_report_order() {
        let labels: Vec<String> = ablation_schemes().iter().map(|l| l.to_string()).collect();
        assert_eq!(
            labels,
            [
                "L=1",
                "L=2",
                "L=3",
                "L=4",
                "L=1,2",
                "L=3,4",
                "L=1,4",
                "L=1,2,3",
                "L=2,3,4",
                "L=1,2,3,4"
            ]
        );
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn classifier_input_is_levels_times_c() {
        let mut cfg = MulterConfig::full(23);
        assert_eq!(cfg.feature_dim(), 512);
        cfg.levels = "4".parse().unwrap();
        assert_eq!(cfg.feature_dim(), 128);
    }

    #[test]
    fn level_set_serde_roundtrip() {
        let l: LevelSet = "2,3".parse().unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, "[2,3]");
        assert_eq!(serde_json::from_str::<LevelSet>(&s).unwrap(), l);
        assert!(serde_json::from_str::<LevelSet>("[]").is_err());
    }
}
