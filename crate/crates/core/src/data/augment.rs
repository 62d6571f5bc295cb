use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RgbImage;
use crate::error::{Error, Result};

/// Bilinear resampling with pixel-center alignment; edges are clamped.
pub fn resize_bilinear(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..height).map(|y| axis(y, sy, img.height)).collect();
    let cols: Vec<_> = (0..width).map(|x| axis(x, sx, img.width)).collect();
    RgbImage::from_fn(height, width, |y, x, c| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
        let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// The `size×size` window whose top-left corner is `(top, left)`.
pub fn crop(img: &RgbImage, top: usize, left: usize, size: usize) -> Result<RgbImage> {
    if top + size > img.height || left + size > img.width || size == 0 {
        return Err(Error::Data(format!(
            "crop of {size} at ({top}, {left}) exceeds {}x{} image",
            img.height, img.width
        )));
    }
    Ok(RgbImage::from_fn(size, size, |y, x, c| img.get(top + y, left + x, c)))
}

/// Crop at an offset drawn uniformly from all valid positions.
pub fn random_crop<R: Rng + ?Sized>(img: &RgbImage, size: usize, rng: &mut R) -> Result<RgbImage> {
    if size > img.height || size > img.width {
        return Err(Error::Data(format!(
            "crop of {size} exceeds {}x{} image",
            img.height, img.width
        )));
    }
    let top = rng.gen_range(0..=img.height - size);
    let left = rng.gen_range(0..=img.width - size);
    crop(img, top, left, size)
}

pub fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if size > img.height || size > img.width {
        return Err(Error::Data(format!(
            "crop of {size} exceeds {}x{} image",
            img.height, img.width
        )));
    }
    crop(img, (img.height - size) / 2, (img.width - size) / 2, size)
}

/// Mirrors about the vertical axis with probability `p`.
pub fn random_hflip<R: Rng + ?Sized>(img: &RgbImage, p: f64, rng: &mut R) -> RgbImage {
    if rng.gen::<f64>() < p {
        hflip(img)
    } else {
        img.clone()
    }
}

pub(crate) fn hflip(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.height, img.width, |y, x, c| img.get(y, img.width - 1 - x, c))
}

/// Resize, then crop: random crop plus flip for training, center crop for
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,
}

impl Pipeline {
    /// 256 → 224 with 50% flips.
    pub fn standard() -> Self {
        Self {
            resize: 256,
            crop: 224,
            flip_prob: 0.5,
        }
    }

    /// 72 → 64 with 50% flips, for the small synthetic images.
    pub fn desk() -> Self {
        Self {
            resize: 72,
            crop: 64,
            flip_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be positive and at most the resize target {}",
                self.crop, self.resize
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }

    pub fn train_view<R: Rng + ?Sized>(&self, img: &RgbImage, rng: &mut R) -> Result<RgbImage> {
        let resized = resize_bilinear(img, self.resize, self.resize);
        let cropped = random_crop(&resized, self.crop, rng)?;
        Ok(random_hflip(&cropped, self.flip_prob, rng))
    }

    pub fn eval_view(&self, img: &RgbImage) -> Result<RgbImage> {
        center_crop(&resize_bilinear(img, self.resize, self.resize), self.crop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;

    fn ramp(h: usize, w: usize) -> RgbImage {
        RgbImage::from_fn(h, w, |y, x, c| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64)
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = RgbImage::filled(7, 5, [0.2, 0.4, 0.6]);
        let r = resize_bilinear(&img, 16, 11);
        assert_eq!((r.height(), r.width()), (16, 11));
        for p in r.data().chunks(3) {
            assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15 && (p[2] - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(random_crop(&img, 6, &mut init_rng(0, "c")).unwrap(), img);
        assert_eq!(center_crop(&img, 6).unwrap(), img);
    }

    #[test]
    fn crop_offsets_cover_33_positions() {
        let resized = ramp(256, 256);
        let mut seen = std::collections::BTreeSet::new();
        let mut rng = init_rng(4, "offsets");
        for _ in 0..4000 {
            let c = random_crop(&resized, 224, &mut rng).unwrap();
            // the top-left pixel identifies the offset
            let v = c.get(0, 0, 0) * (256.0 * 256.0 * 3.0);
            let idx = (v.round() as usize) / 3;
            seen.insert((idx / 256, idx % 256));
        }
        let rows: std::collections::BTreeSet<_> = seen.iter().map(|p| p.0).collect();
        let cols: std::collections::BTreeSet<_> = seen.iter().map(|p| p.1).collect();
        assert_eq!(rows.len(), 33);
        assert_eq!(cols.len(), 33);
        assert_eq!(*rows.iter().max().unwrap(), 32);
    }

    #[test]
    fn flips() {
        let img = ramp(3, 4);
        let mut rng = init_rng(0, "f");
        assert_eq!(random_hflip(&img, 0.0, &mut rng), img);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
        assert_eq!(random_hflip(&img, 1.0, &mut rng), hflip(&img));
    }

    #[test]
    fn flip_rate_near_half() {
        let img = ramp(2, 2);
        let flipped = hflip(&img);
        let mut rng = init_rng(99, "flip-rate");
        let n = 10_000;
        let hits = (0..n).filter(|_| random_hflip(&img, 0.5, &mut rng) == flipped).count();
        let rate = hits as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn pipeline_validation() {
        assert!(Pipeline {
            resize: 64,
            crop: 72,
            flip_prob: 0.5
        }
        .validate()
        .is_err());
        assert!(Pipeline::standard().validate().is_ok());
    }
}
