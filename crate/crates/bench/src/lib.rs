//! Shared fixtures for the kernel benchmarks.

use multer_core::data::{images_to_tensor, synth_textures, SynthSpec};
use multer_core::params::init_rng;
use multer_core::{Model, MulterConfig, MulterParams, Result, Tensor};

pub fn random(shape: &[usize], key: &str) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut init_rng(0, key))
}

/// Desk-scale four-class model with fresh weights.
pub fn desk_model() -> Result<Model> {
    let cfg = MulterConfig::desk(4);
    Model::new(
        MulterParams::init(&cfg, 0)?,
        (0..4).map(|i| format!("class{i}")).collect(),
    )
}

/// First `batch` synthetic training images and their labels.
pub fn synth_batch(batch: usize) -> Result<(Tensor, Vec<usize>)> {
    let data = synth_textures(&SynthSpec::default())?;
    let picked: Vec<_> = data
        .train
        .iter()
        .step_by(data.train.len() / batch)
        .take(batch)
        .collect();
    let images: Vec<_> = picked.iter().map(|s| &s.pixels).collect();
    Ok((images_to_tensor(&images)?, picked.iter().map(|s| s.label).collect()))
}
