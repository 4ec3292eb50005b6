use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel ImageNet statistics used for standardisation.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl Preprocess {
    /// Bilinear resize to `size × size`, scale to `[0, 1]`, standardise; returns CHW.
    pub fn apply(&self, img: &RgbImage, size: usize) -> Array3<f64> {
        let resized;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
            &resized
        };
        let mut out = Array3::zeros((3, size, size));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = (px[c] as f64 / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasingConfig {
    pub probability: f64,
    /// Erased area as a fraction of the image, `[s_l, s_h]`.
    pub area: (f64, f64),
    /// Height / width of the erased rectangle.
    pub aspect: (f64, f64),
    pub max_attempts: usize,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig {
            probability: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.33),
            max_attempts: 100,
        }
    }
}

impl ErasingConfig {
    pub fn disabled() -> Self {
        ErasingConfig {
            probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("augment.erasing.probability", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config("augment.erasing.area", "need 0 < s_l <= s_h < 1"));
        }
        let (a, b) = self.aspect;
        if !(a > 0.0 && a <= b) {
            return Err(Error::config("augment.erasing.aspect", "need 0 < low <= high"));
        }
        Ok(())
    }
}

/// Rectangle replaced by [`random_erasing`], in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// With probability `p`, fills one rectangle of a CHW image with standard-normal noise.
///
/// Rectangles whose realised area fraction falls outside `[s_l, s_h]` are
/// rejected; after `max_attempts` rejections the image is left unchanged.
pub fn random_erasing<R: Rng + ?Sized>(img: &mut Array3<f64>, cfg: &ErasingConfig, rng: &mut R) -> Option<EraseRect> {
    if cfg.probability <= 0.0 || rng.random::<f64>() >= cfg.probability {
        return None;
    }
    let (_, h, w) = img.dim();
    let total = (h * w) as f64;
    for _ in 0..cfg.max_attempts {
        let target = rng.random_range(cfg.area.0..=cfg.area.1) * total;
        let aspect = rng.random_range(cfg.aspect.0..=cfg.aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let frac = (eh * ew) as f64 / total;
        if frac < cfg.area.0 || frac > cfg.area.1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        img.slice_mut(s![.., top..top + eh, left..left + ew])
            .mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        return Some(EraseRect {
            top,
            left,
            height: eh,
            width: ew,
        });
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub erasing: ErasingConfig,
    /// Probability of a horizontal flip.
    pub flip_probability: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            erasing: ErasingConfig::disabled(),
            flip_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.erasing.validate()?;
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("augment.flip_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &mut Array3<f64>, rng: &mut R) {
        if self.flip_probability > 0.0 && rng.random::<f64>() < self.flip_probability {
            img.invert_axis(ndarray::Axis(2));
            *img = img.as_standard_layout().into_owned();
        }
        random_erasing(img, &self.erasing, rng);
    }
}
