//! Run configuration: JSON file, `SAFR_*` environment overrides, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use safr::data::{AugmentConfig, LrSchedule, Preprocess, SamplerConfig, Split, SynthConfig};
use safr::evaluation::Metric;
use safr::losses::LossConfig;
use safr::training::{AdamConfig, TrainConfig};
use safr::ModelConfig;

pub const ENV_PREFIX: &str = "SAFR_";

/// A configuration problem, reported with the dotted path of the offending key.
#[derive(Debug, thiserror::Error)]
#[error("invalid configuration at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Query split against gallery split, same-id-same-camera entries filtered.
    #[default]
    QueryGallery,
    /// VehicleID style: one random gallery image per identity, repeated.
    RepeatedGallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: Metric,
    pub cross_camera_filter: bool,
    pub max_rank: usize,
    pub batch_size: usize,
    pub query_split: Split,
    pub gallery_split: Split,
    pub protocol: Protocol,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: Metric::Euclidean,
            cross_camera_filter: true,
            max_rank: 20,
            batch_size: 32,
            query_split: Split::Query,
            gallery_split: Split::Gallery,
            protocol: Protocol::QueryGallery,
            repeats: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Overrides each variant's native profiling resolution.
    pub input_size: Option<usize>,
    /// Synthetic images used for activation density; 0 skips densities.
    pub density_images: usize,
    pub density_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub preprocess: Preprocess,
    pub schedule: LrSchedule,
    pub optimizer: AdamConfig,
    pub total_epochs: usize,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            manifest: None,
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            workers: None,
            model: t.model,
            loss: t.loss,
            sampler: t.sampler,
            augment: t.augment,
            preprocess: t.preprocess,
            schedule: t.schedule,
            optimizer: t.optimizer,
            total_epochs: t.total_epochs,
            eval: EvalConfig::default(),
            profile: ProfileConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
            sampler: self.sampler.clone(),
            augment: self.augment.clone(),
            preprocess: self.preprocess.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            total_epochs: self.total_epochs,
            seed: self.seed,
            out_dir: Some(self.out_dir.clone()),
        }
    }
}

/// Sets `path` (already split on `.`) inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::new(path[..i].join("."), "is not a table"))?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses an override value: JSON if it parses, otherwise a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// `SAFR_MODEL__WIDTH_MULTIPLIER=0.5` becomes `model.width_multiplier = 0.5`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(Vec<String>, Value)> {
    let mut out: Vec<_> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
            Some((path, parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Resolves file, environment and flag layers into a typed config.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(Vec<String>, Value)],
) -> anyhow::Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError::new("config", format!("{} is not valid JSON: {e}", path.display())))?;
        merge(&mut root, layer);
    }
    for (path, value) in env_overrides(env).into_iter().chain(flags.iter().cloned()) {
        set_path(&mut root, &path, value)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::new(field, e.into_inner().to_string())
    })?;
    Ok(cfg)
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}
