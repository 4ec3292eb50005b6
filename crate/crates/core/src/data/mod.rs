//! Dataset manifests, P×K sampling, augmentation, the learning-rate schedule
//! and the synthetic desk-scale dataset.

pub mod augment;
pub mod manifest;
pub mod sampler;
pub mod schedule;
pub mod synth;

use std::borrow::Cow;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{random_erasing, AugmentConfig, EraseRect, ErasingConfig, Preprocess, IMAGENET_MEAN, IMAGENET_STD};
pub use manifest::{load_manifest, read_label_map, write_manifest, DatasetIndex, Record, Split};
pub use sampler::{pk_sample, SamplerConfig, TripletBatch};
pub use schedule::{warmup_lr, LrSchedule};
pub use synth::{synth_dataset, write_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::params::Tensor;

/// A dataset index plus its pixels, held in memory or read from disk on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    index: DatasetIndex,
    images: Option<Vec<RgbImage>>,
}

impl Dataset {
    pub fn in_memory(index: DatasetIndex, images: Vec<RgbImage>) -> Self {
        assert_eq!(index.len(), images.len(), "one image per record");
        Dataset {
            index,
            images: Some(images),
        }
    }

    pub fn on_disk(index: DatasetIndex) -> Self {
        Dataset { index, images: None }
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        Ok(Dataset::on_disk(load_manifest(path)?))
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    /// Decoded RGB pixels of one record.
    pub fn rgb(&self, record: usize) -> Result<Cow<'_, RgbImage>> {
        if let Some(images) = &self.images {
            return Ok(Cow::Borrowed(&images[record]));
        }
        let path = &self.index.records()[record].path;
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        Ok(Cow::Owned(img.to_rgb8()))
    }

    /// Stacks preprocessed (and optionally augmented) images into `[N, 3, size, size]`.
    ///
    /// Each sample draws augmentation randomness from its own generator seeded
    /// by `seed` and its batch position, so the result does not depend on the
    /// number of worker threads.
    pub fn load_batch(
        &self,
        records: &[usize],
        size: usize,
        preprocess: &Preprocess,
        augment: Option<&AugmentConfig>,
        seed: u64,
    ) -> Result<Tensor> {
        let samples: Vec<_> = records
            .par_iter()
            .enumerate()
            .map(|(pos, &r)| {
                let mut x = preprocess.apply(&*self.rgb(r)?, size);
                if let Some(aug) = augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pos as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    aug.apply(&mut x, &mut rng);
                }
                Ok(x)
            })
            .collect::<Result<_>>()?;
        let mut out = Array4::zeros((records.len(), 3, size, size));
        for (i, x) in samples.iter().enumerate() {
            out.slice_mut(s![i, .., .., ..]).assign(x);
        }
        Ok(out.into_dyn())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn warmup_endpoints() {
        assert_eq!(warmup_lr(0, 3.5e-4, 10), 3.5e-4 * 0.1);
        assert_eq!(warmup_lr(10, 3.5e-4, 10), 3.5e-4);
        assert!((warmup_lr(5, 1.0, 10) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn singleton_identity_repeats() {
        let recs = vec![
            Record {
                path: "a".into(),
                identity: 7,
                camera: 0,
                split: Split::Train,
            },
            Record {
                path: "b".into(),
                identity: 9,
                camera: 1,
                split: Split::Train,
            },
            Record {
                path: "c".into(),
                identity: 9,
                camera: 0,
                split: Split::Train,
            },
        ];
        let idx = DatasetIndex::from_records(recs).unwrap();
        assert_eq!(idx.num_classes(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = pk_sample(&idx, &SamplerConfig { p: 2, k: 4 }, &mut rng).unwrap();
        assert_eq!(b.records.iter().filter(|&&r| r == 0).count(), 4);
    }

    #[test]
    fn erasing_stays_in_range() {
        let cfg = ErasingConfig {
            probability: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut img = ndarray::Array3::<f64>::from_elem((3, 100, 100), 7.0);
            let r = random_erasing(&mut img, &cfg, &mut rng).expect("p = 1 always erases");
            let frac = (r.height * r.width) as f64 / 1e4;
            assert!((0.02..=0.4).contains(&frac));
            let changed = img.iter().filter(|&&v| v != 7.0).count();
            assert_eq!(changed, 3 * r.height * r.width);
        }
    }
}
