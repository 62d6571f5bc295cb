//! Run configuration: flags, an optional `key=value` file, the `MULTER_SEED`
//! environment variable and defaults, in that order of precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use multer_core::data::{Pipeline, SynthSpec};
use multer_core::{BackboneConfig, LevelSet, MulterConfig, TrainingConfig};

pub const SEED_ENV: &str = "MULTER_SEED";

/// Keys accepted in a config file; the same names as the long flags.
const FILE_KEYS: [&str; 16] = [
    "data",
    "levels",
    "k",
    "c",
    "branch",
    "backbone",
    "lr",
    "momentum",
    "epochs",
    "batch",
    "seed",
    "out",
    "train-per-class",
    "test-per-class",
    "image-size",
    "noise",
];

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// `synth` for the procedural texture set, otherwise a dataset root
    /// holding `train/<class>/*` and `test/<class>/*`.
    #[arg(long)]
    pub data: Option<String>,
    /// Backbone levels that get an encoding module, e.g. `1,2,3,4` or `L=1,4`.
    #[arg(long)]
    pub levels: Option<String>,
    /// Codewords per encoding module.
    #[arg(long)]
    pub k: Option<usize>,
    /// Output length of each encoding module.
    #[arg(long)]
    pub c: Option<usize>,
    /// Width of the two bilinear branches.
    #[arg(long)]
    pub branch: Option<usize>,
    /// `full` (64/128/256/512) or `reduced` (8/16/32/64).
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Falls back to the MULTER_SEED environment variable, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key=value` file using the long flag names as keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Synthetic set: training images per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Synthetic set: test images per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Synthetic set: image side in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Synthetic set: standard deviation of pixel noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Dir(PathBuf),
}

/// Everything a command needs, fully resolved. `model.classes` is a
/// placeholder until the dataset is loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: MulterConfig,
    pub training: TrainingConfig,
    pub pipeline: Pipeline,
    pub out: PathBuf,
    pub seed: u64,
}

pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1))?;
        let key = key.trim().replace('_', "-");
        if !FILE_KEYS.contains(&key.as_str()) {
            bail!("{}:{}: unknown key {key:?}", path.display(), n + 1);
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

struct Sources<'a> {
    file: BTreeMap<String, String>,
    args: &'a RunArgs,
}

impl Sources<'_> {
    /// Flag value if given, else the parsed file value.
    fn get<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config value {key}={v:?}: {e}")))
            .transpose()
    }
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        let src = Sources { file, args: self };
        let a = src.args;

        let seed = match src.get(a.seed, "seed")? {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().map_err(|e| anyhow!("{SEED_ENV}={v:?}: {e}"))?,
                Err(_) => 0,
            },
        };

        let data = src.get(a.data.clone(), "data")?.unwrap_or_else(|| "synth".into());
        let synthetic = data == "synth";
        let mut model = if synthetic {
            MulterConfig::desk(1)
        } else {
            MulterConfig::full(1)
        };
        if let Some(levels) = src.get(a.levels.clone(), "levels")? {
            model.levels = levels.parse::<LevelSet>()?;
        }
        if let Some(k) = src.get(a.k, "k")? {
            model.codewords = k;
        }
        if let Some(c) = src.get(a.c, "c")? {
            model.out_dim = c;
        }
        if let Some(b) = src.get(a.branch, "branch")? {
            model.branch_dim = b;
        }
        if let Some(name) = src.get(a.backbone.clone(), "backbone")? {
            model.backbone = match name.as_str() {
                "full" => BackboneConfig::full(),
                "reduced" => BackboneConfig::reduced(),
                other => bail!("unknown backbone {other:?}; expected full or reduced"),
            };
        }

        model.validate()?;

        let defaults = TrainingConfig::default();
        let training = TrainingConfig {
            base_lr: src.get(a.lr, "lr")?.unwrap_or(defaults.base_lr),
            momentum: src.get(a.momentum, "momentum")?.unwrap_or(defaults.momentum),
            epochs: src.get(a.epochs, "epochs")?.unwrap_or(defaults.epochs),
            batch_size: src
                .get(a.batch, "batch")?
                .unwrap_or(if synthetic { 16 } else { defaults.batch_size }),
            seed,
            ..defaults
        };
        training.validate()?;

        let synth_keys = [
            ("train-per-class", a.train_per_class.is_some()),
            ("test-per-class", a.test_per_class.is_some()),
            ("image-size", a.image_size.is_some()),
            ("noise", a.noise.is_some()),
        ];
        let (data, pipeline) = if synthetic {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                train_per_class: src
                    .get(a.train_per_class, "train-per-class")?
                    .unwrap_or(d.train_per_class),
                test_per_class: src.get(a.test_per_class, "test-per-class")?.unwrap_or(d.test_per_class),
                size: src.get(a.image_size, "image-size")?.unwrap_or(d.size),
                noise: src.get(a.noise, "noise")?.unwrap_or(d.noise),
                seed,
                ..d
            };
            spec.validate()?;
            (DataSource::Synth(spec), desk_pipeline(spec.size))
        } else {
            if let Some((key, _)) = synth_keys.iter().find(|(k, set)| *set || src.file.contains_key(*k)) {
                bail!("--{key} only applies to --data synth");
            }
            (DataSource::Dir(PathBuf::from(data)), Pipeline::standard())
        };

        Ok(RunConfig {
            data,
            model,
            training,
            pipeline,
            out: src
                .get(a.out.clone(), "out")?
                .unwrap_or_else(|| PathBuf::from("multer-run")),
            seed,
        })
    }
}

/// Resize to 9/8 of the image side, crop back to it: 64 → 72 → 64, the
/// same proportions as 256 → 224 at full scale.
pub fn desk_pipeline(size: usize) -> Pipeline {
    Pipeline {
        resize: size + size / 8,
        crop: size,
        ..Pipeline::desk()
    }
}
