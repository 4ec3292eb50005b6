//! Optimisation loop: P×K batches, combined loss, Adam and center updates,
//! checkpoints and a JSON-lines log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{build_model, Model, ModelConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};
use crate::data::{pk_sample, AugmentConfig, Dataset, LrSchedule, Preprocess, SamplerConfig, TripletBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{combined_loss_var, update_centers, Centers, LossConfig};
use crate::params::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with bias correction and optional L2 weight decay.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    pub(crate) fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|(m, v)| (ParamId(i), m, v)))
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        if self.moments.len() <= id.index() {
            self.moments.resize(id.index() + 1, None);
        }
        self.moments[id.index()] = Some((m, v));
    }

    /// Applies one update to every learnable parameter with a gradient.
    pub fn step<'a>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (ParamId, &'a Tensor)>, lr: f64) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.entry(id).kind.learnable() {
                continue;
            }
            let slot = self.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let p = store.value_mut(id);
            let (m, v) = slot;
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub preprocess: Preprocess,
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub total_epochs: usize,
    pub seed: u64,
    /// Output directory for checkpoints, logs and the resolved config.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
            preprocess: Preprocess::default(),
            schedule: LrSchedule::default(),
            optimizer: AdamConfig::default(),
            total_epochs: 120,
            seed: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Checks every field that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sampler.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        let mut m = self.model.clone();
        m.num_classes = m.num_classes.max(2);
        m.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_softmax: f64,
    pub loss_triplet: f64,
    pub loss_center: f64,
    pub lambda: f64,
    pub loss_total: f64,
    /// Seconds since the run (or resume) started.
    pub wall_time: f64,
}

impl TrainLogRecord {
    /// `|L_F − (L_S + L_T + λ·L_C)|`.
    pub fn composition_error(&self) -> f64 {
        (self.loss_total - (self.loss_softmax + self.loss_triplet + self.lambda * self.loss_center)).abs()
    }
}

/// Model, centers and optimizer state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    /// Absent when `λ = 0`.
    pub centers: Option<Centers>,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let centers = (cfg.loss.lambda > 0.0).then(|| Centers::zeros(model.config().num_classes, model.embedding_dim()));
        Trainer {
            model,
            centers,
            optimizer: Adam::new(cfg.optimizer.clone()),
            epoch: 0,
            step: 0,
        }
    }

    /// One optimizer step on `L_F` for preprocessed images and contiguous labels.
    pub fn step_on(&mut self, images: Tensor, labels: &[usize], cfg: &TrainConfig, lr: f64) -> Result<TrainLogRecord> {
        // The graph holds references to parameter tensors; drop it before
        // the update so the optimizer mutates them in place.
        let (grads, buffers, emb, br) = {
            let g = Graph::train();
            let x = g.input(images);
            let f = self.model.features(&g, &x)?;
            let logits = self.model.logits(&g, &f)?;
            let (loss, br) = combined_loss_var(&logits, &f, labels, self.centers.as_ref(), &cfg.loss)?;
            let grads = g.backward(&loss);
            let emb: Array2<f64> = f.value().clone().into_dimensionality::<Ix2>().expect("features are 2-D");
            (grads, g.take_buffer_updates(), emb, br)
        };
        let store = self.model.store_mut();
        self.optimizer.step(store, grads.params(), lr);
        for (id, v) in buffers {
            store.set(id, v);
        }
        if let Some(c) = &self.centers {
            self.centers = Some(update_centers(c, &emb, labels, cfg.loss.center_lr)?);
        }
        self.step += 1;
        Ok(TrainLogRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss_softmax: br.softmax,
            loss_triplet: br.triplet,
            loss_center: br.center,
            lambda: br.lambda,
            loss_total: br.total,
            wall_time: 0.0,
        })
    }

    /// Loads, augments and trains on one sampled batch.
    pub fn train_step(
        &mut self,
        dataset: &Dataset,
        batch: &TripletBatch,
        cfg: &TrainConfig,
        lr: f64,
        augment_seed: u64,
    ) -> Result<TrainLogRecord> {
        let size = self.model.config().input_size;
        let images = dataset.load_batch(&batch.records, size, &cfg.preprocess, Some(&cfg.augment), augment_seed)?;
        self.step_on(images, &batch.labels, cfg, lr).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg} at step {} (batch identities {:?})",
                self.step + 1,
                batch.identities
            )),
            other => other,
        })
    }

    fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            &CheckpointState {
                centers: self.centers.as_ref(),
                optimizer: Some(&self.optimizer),
                epoch: self.epoch,
                step: self.step,
                metadata: serde_json::to_value(cfg)?,
            },
        )
    }
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    /// Records produced by this invocation.
    pub log: Vec<TrainLogRecord>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LABEL_MAP_FILE: &str = "labels.csv";

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn prepare(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainConfig> {
    cfg.validate()?;
    let n = dataset.index().num_classes();
    if n < cfg.sampler.p {
        return Err(Error::Data(format!(
            "{n} training identities, fewer than P = {}",
            cfg.sampler.p
        )));
    }
    let mut cfg = cfg.clone();
    cfg.model.num_classes = n;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Trains from scratch for `total_epochs`.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset) -> Result<FitOutcome> {
    let cfg = prepare(cfg, dataset)?;
    let model = build_model(&cfg.model, cfg.seed)?;
    let trainer = Trainer::new(model, &cfg);
    run(trainer, &cfg, dataset, false)
}

/// Continues a run from a checkpoint written by [`fit`]; epochs already completed are skipped.
pub fn resume(cfg: &TrainConfig, dataset: &Dataset, checkpoint: &Path) -> Result<FitOutcome> {
    let cfg = prepare(cfg, dataset)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.model.config().num_classes != cfg.model.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, dataset {}",
            ck.model.config().num_classes,
            cfg.model.num_classes
        )));
    }
    let mut optimizer = ck.optimizer.unwrap_or_default();
    optimizer.config = cfg.optimizer.clone();
    let centers = match (cfg.loss.lambda > 0.0, ck.centers) {
        (true, Some(c)) => Some(c),
        (true, None) => Some(Centers::zeros(cfg.model.num_classes, ck.model.embedding_dim())),
        (false, _) => None,
    };
    let trainer = Trainer {
        model: ck.model,
        centers,
        optimizer,
        epoch: ck.manifest.epoch,
        step: ck.manifest.step,
    };
    run(trainer, &cfg, dataset, true)
}

fn run(mut trainer: Trainer, cfg: &TrainConfig, dataset: &Dataset, append: bool) -> Result<FitOutcome> {
    let out = cfg.out_dir.as_deref();
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(&dir.join(CONFIG_FILE), cfg)?;
            dataset.index().write_label_map(&dir.join(LABEL_MAP_FILE))?;
            let path = dir.join(LOG_FILE);
            let file = if append {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let last = out.map(|d| d.join(LAST_CHECKPOINT));
    let best = out.map(|d| d.join(BEST_CHECKPOINT));
    if let (Some(path), 0) = (&last, cfg.total_epochs) {
        trainer.save(path, cfg)?;
    }
    let train_size = dataset.index().split_indices(crate::data::Split::Train).len();
    let batches = cfg.sampler.batches_per_epoch(train_size);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best_loss = f64::INFINITY;
    while trainer.epoch < cfg.total_epochs {
        let epoch = trainer.epoch;
        let lr = cfg.schedule.lr(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            let batch = pk_sample(dataset.index(), &cfg.sampler, &mut rng)?;
            let mut rec = trainer.train_step(dataset, &batch, cfg, lr, rng.random())?;
            rec.wall_time = start.elapsed().as_secs_f64();
            epoch_loss += rec.loss_total / batches as f64;
            if let Some((w, path)) = &mut writer {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
            }
            log.push(rec);
        }
        trainer.epoch += 1;
        log::info!("epoch {epoch}: lr {lr:.3e}, mean L_F {epoch_loss:.5}");
        if let Some((w, path)) = &mut writer {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(path) = &last {
            trainer.save(path, cfg)?;
        }
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            if let Some(path) = &best {
                trainer.save(path, cfg)?;
            }
        }
    }
    Ok(FitOutcome {
        trainer,
        log,
        last_checkpoint: last,
        best_checkpoint: best.filter(|p| p.exists()),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
