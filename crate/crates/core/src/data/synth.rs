//! Procedural texture classes for desk-scale experiments.
//!
//! Four generator families, each sample drawn with its own orientation,
//! phase and scale jitter plus additive pixel noise. Every sample's random
//! stream is derived from the seed and the sample's identity, so a dataset
//! is reproduced exactly from its [`SynthSpec`].

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabeledImage, RgbImage};
use crate::error::{Error, Result};
use crate::params::init_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Oriented sinusoidal gratings.
    Grating,
    Checkerboard,
    /// Isotropic low-pass filtered noise.
    Noise,
    /// Hard-edged thin stripes.
    Stripes,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Grating, Family::Checkerboard, Family::Noise, Family::Stripes];

    pub fn name(self) -> &'static str {
        match self {
            Family::Grating => "grating",
            Family::Checkerboard => "checkerboard",
            Family::Noise => "noise",
            Family::Stripes => "stripes",
        }
    }
}

pub const MAX_SYNTH_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Classes 0..4 are the four families; 4..8 repeat them at a coarser scale.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Scales orientation, phase and period randomness; 0 gives canonical
    /// axis-aligned textures.
    pub jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 50,
            test_per_class: 20,
            size: 64,
            seed: 0,
            jitter: 1.0,
            noise: 0.08,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 32 pixels, got {}",
                self.size
            )));
        }
        if self.classes == 0 || self.classes > MAX_SYNTH_CLASSES {
            return Err(Error::Config(format!(
                "synthetic class count must be 1..={MAX_SYNTH_CLASSES}"
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "synthetic splits need at least one sample per class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter) || self.noise < 0.0 {
            return Err(Error::Config("jitter must be in [0, 1] and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn class_name(class: usize) -> String {
        let family = Family::ALL[class % 4].name();
        match class / 4 {
            0 => family.to_string(),
            band => format!("{family}-coarse{band}"),
        }
    }
}

/// Texture value in `[0, 1]` at `(y, x)` before noise and tint.
struct Texture {
    family: Family,
    /// Period (gratings, stripes) or cell size (checkerboards) in pixels.
    scale: f64,
    /// Unit direction of the pattern axis.
    dir: (f64, f64),
    phase: f64,
    field: Vec<f64>,
}

impl Texture {
    fn draw<R: Rng>(family: Family, band: usize, spec: &SynthSpec, rng: &mut R) -> Self {
        let j = spec.jitter;
        let coarse = 1.6f64.powi(band as i32);
        // canonical scale, relative spread, fraction of the full rotation
        let (base, spread) = match family {
            Family::Grating => (7.0, 0.25),
            Family::Checkerboard => (8.0, 0.25),
            Family::Noise => (2.0, 0.25),
            Family::Stripes => (14.0, 0.2),
        };
        let scale = base * coarse * (1.0 + j * spread * rng.gen_range(-1.0..1.0));
        let angle = j * rng.gen_range(0.0..PI);
        let phase = j * rng.gen_range(0.0..1.0);
        let field = if family == Family::Noise {
            smoothed_noise(spec.size, scale, rng)
        } else {
            Vec::new()
        };
        Self {
            family,
            scale,
            dir: (angle.cos(), angle.sin()),
            phase,
            field,
        }
    }

    fn value(&self, y: usize, x: usize, size: usize) -> f64 {
        let (fy, fx) = (y as f64, x as f64);
        let u = fx * self.dir.0 + fy * self.dir.1;
        let v = -fx * self.dir.1 + fy * self.dir.0;
        match self.family {
            Family::Grating => 0.5 + 0.4 * (2.0 * PI * (u / self.scale + self.phase)).sin(),
            Family::Checkerboard => {
                let a = (u / self.scale + self.phase).floor() as i64;
                let b = (v / self.scale + self.phase).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    0.85
                } else {
                    0.15
                }
            }
            Family::Noise => self.field[y * size + x],
            Family::Stripes => {
                let t = (u / self.scale + self.phase).rem_euclid(1.0);
                if t < 0.25 {
                    0.85
                } else {
                    0.15
                }
            }
        }
    }
}

/// White noise blurred by a periodic Gaussian of width `sigma`, rescaled to
/// mean 0.5 and standard deviation 0.18.
fn smoothed_noise<R: Rng>(size: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..size * size).map(|_| normal.sample(rng)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = size as isize;
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (t, w) in (-radius..=radius).zip(&kernel) {
                    let (yy, xx) = if horizontal {
                        (y, (x + t).rem_euclid(n))
                    } else {
                        ((y + t).rem_euclid(n), x)
                    };
                    acc += w * src[(yy * n + xx) as usize];
                }
                out[(y * n + x) as usize] = acc;
            }
        }
        out
    };
    let field = blur(&blur(&white, true), false);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
    field.iter().map(|v| 0.5 + 0.18 * (v - mean) / std.max(1e-12)).collect()
}

fn sample(spec: &SynthSpec, class: usize, split: &str, index: usize) -> LabeledImage {
    let id = format!("{split}-{}-{index:04}", SynthSpec::class_name(class));
    let mut rng = init_rng(spec.seed, &format!("synth/{id}"));
    let texture = Texture::draw(Family::ALL[class % 4], class / 4, spec, &mut rng);
    let gains: [f64; 3] = std::array::from_fn(|_| 1.0 - 0.15 * spec.jitter * rng.gen_range(0.0..1.0));
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise level");
    let mut values = Vec::with_capacity(spec.size * spec.size);
    for y in 0..spec.size {
        for x in 0..spec.size {
            values.push(texture.value(y, x, spec.size));
        }
    }
    let pixels = RgbImage::from_fn(spec.size, spec.size, |y, x, c| {
        let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        values[y * spec.size + x] * gains[c] + noise
    });
    LabeledImage {
        pixels,
        label: class,
        id,
    }
}

/// Generates both splits in memory.
pub fn synth_textures(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = |name: &str, per_class: usize| -> Vec<LabeledImage> {
        (0..spec.classes)
            .flat_map(|c| (0..per_class).map(move |i| (c, i)))
            .map(|(c, i)| sample(spec, c, name, i))
            .collect()
    };
    Ok(Dataset {
        class_names: (0..spec.classes).map(SynthSpec::class_name).collect(),
        train: split("train", spec.train_per_class),
        test: split("test", spec.test_per_class),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SynthSpec {
            train_per_class: 3,
            test_per_class: 2,
            seed: 5,
            ..SynthSpec::default()
        };
        assert_eq!(synth_textures(&spec).unwrap(), synth_textures(&spec).unwrap());
        let other = SynthSpec { seed: 6, ..spec };
        assert_ne!(synth_textures(&spec).unwrap(), synth_textures(&other).unwrap());
    }

    #[test]
    fn zero_jitter_checkerboard_tiles_exactly() {
        let spec = SynthSpec {
            classes: 2,
            train_per_class: 1,
            test_per_class: 1,
            jitter: 0.0,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let data = synth_textures(&spec).unwrap();
        let board = &data.train.iter().find(|s| s.label == 1).unwrap().pixels;
        let period = 16;
        for y in 0..spec.size {
            for x in 0..spec.size {
                assert_eq!(board.get(y, x, 0), board.get((y + period) % spec.size, x, 0));
                assert_eq!(board.get(y, x, 0), board.get(y, (x + period) % spec.size, 0));
            }
        }
        assert_ne!(board.get(0, 0, 0), board.get(0, 8, 0));
        assert_eq!(board.get(0, 0, 0), board.get(8, 8, 0));
    }

    #[test]
    fn pixel_range_and_labels() {
        let data = synth_textures(&SynthSpec {
            train_per_class: 2,
            test_per_class: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(data.train.len(), 8);
        assert_eq!(data.test.len(), 4);
        for s in data.train.iter().chain(&data.test) {
            assert!(s.label < 4);
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(data.class_names, ["grating", "checkerboard", "noise", "stripes"]);
    }

    #[test]
    fn ids_are_unique_across_splits() {
        let data = synth_textures(&SynthSpec {
            train_per_class: 3,
            test_per_class: 3,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut ids: Vec<&str> = data.train.iter().chain(&data.test).map(|s| s.id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn rejects_tiny_images() {
        let spec = SynthSpec {
            size: 16,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_textures(&spec), Err(Error::Config(_))));
    }
}
