//! Procedural vehicle-like images for desk-scale experiments.
//!
//! Each identity is a template made of a body colour, a stripe pattern
//! (orientation, period, colour) and a rectangular decal. Samples of an
//! identity shift the template, jitter its brightness per camera and add
//! pixel noise.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, DatasetIndex, Record, Split};
use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_ids: usize,
    /// Training samples per identity.
    pub samples_per_id: usize,
    /// Extra held-out samples per identity in the query split.
    pub query_per_id: usize,
    /// Extra held-out samples per identity in the gallery split.
    pub gallery_per_id: usize,
    pub image_size: usize,
    pub num_cameras: usize,
    /// Pixel noise standard deviation on the 0–255 scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids: 8,
            samples_per_id: 6,
            query_per_id: 0,
            gallery_per_id: 0,
            image_size: 64,
            num_cameras: 2,
            noise: 12.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Template {
    body: [f64; 3],
    stripe: [f64; 3],
    decal: [f64; 3],
    vertical: bool,
    period: f64,
    phase: f64,
    decal_pos: (f64, f64),
    decal_size: (f64, f64),
}

impl Template {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let mut colour = || [0, 1, 2].map(|_| rng.random_range(20.0..235.0));
        let (body, stripe, decal) = (colour(), colour(), colour());
        Template {
            body,
            stripe,
            decal,
            vertical: rng.random(),
            period: rng.random_range(0.12..0.4),
            phase: rng.random_range(0.0..1.0),
            decal_pos: (rng.random_range(0.15..0.6), rng.random_range(0.15..0.6)),
            decal_size: (rng.random_range(0.15..0.3), rng.random_range(0.15..0.3)),
        }
    }

    fn render<R: Rng>(&self, size: usize, camera: usize, noise: f64, rng: &mut R) -> RgbImage {
        let shift = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
        let gain = 1.0 + 0.12 * camera as f64 - 0.06 + rng.random_range(-0.05..0.05);
        let dist = Normal::new(0.0, noise.max(1e-9)).expect("valid normal");
        let mut img = RgbImage::new(size as u32, size as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let u = x as f64 / size as f64 - shift.0;
            let v = y as f64 / size as f64 - shift.1;
            let t = if self.vertical { u } else { v };
            let in_stripe = ((t / self.period + self.phase).fract() + 1.0).fract() < 0.35;
            let in_decal = (u - self.decal_pos.0) >= 0.0
                && (u - self.decal_pos.0) < self.decal_size.0
                && (v - self.decal_pos.1) >= 0.0
                && (v - self.decal_pos.1) < self.decal_size.1;
            let base = if in_decal {
                self.decal
            } else if in_stripe {
                self.stripe
            } else {
                self.body
            };
            let c = base.map(|b| {
                let n = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
                (b * gain + n).clamp(0.0, 255.0).round() as u8
            });
            *px = Rgb(c);
        }
        img
    }
}

/// Generates an in-memory dataset; identity `i` has id `i`, cameras cycle over samples.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_ids < 2 {
        return Err(Error::config("synth.num_ids", "at least 2 identities are required"));
    }
    if cfg.num_cameras < 2 {
        return Err(Error::config("synth.num_cameras", "at least 2 cameras are required"));
    }
    if cfg.image_size < 8 {
        return Err(Error::config("synth.image_size", "must be at least 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.num_ids).map(|_| Template::random(&mut rng)).collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    let per_id = cfg.samples_per_id + cfg.query_per_id + cfg.gallery_per_id;
    for (id, t) in templates.iter().enumerate() {
        for s in 0..per_id {
            let split = if s < cfg.samples_per_id {
                Split::Train
            } else if s < cfg.samples_per_id + cfg.query_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
            let camera = s % cfg.num_cameras;
            images.push(t.render(cfg.image_size, camera, cfg.noise, &mut rng));
            records.push(Record {
                path: PathBuf::from(format!("images/{id:04}_c{camera}_{s:03}.png")),
                identity: id as u64,
                camera: camera as u64,
                split,
            });
        }
    }
    Ok(Dataset::in_memory(DatasetIndex::from_records(records)?, images))
}

/// Writes the images of an in-memory dataset as PNGs plus `manifest.csv` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.index().len());
    for (i, r) in dataset.index().records().iter().enumerate() {
        let path = dir.join(&r.path);
        dataset.rgb(i)?.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        records.push(Record { path, ..r.clone() });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
