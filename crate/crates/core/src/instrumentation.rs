//! Parameter and FLOP counting, activation density and model cards.
//!
//! FLOPs are measured by running the feature path once in metering mode on
//! a single `3 × S × S` image, so every operation contributes through the
//! same code that computes it. Costs per operation kind:
//!
//! | operation                   | FLOPs                          |
//! |-----------------------------|--------------------------------|
//! | convolution                 | 2·k²·(C_in/groups)·C_out·H_out·W_out, plus one per output for a bias |
//! | linear                      | 2·D_in·D_out, plus D_out for the bias |
//! | batch norm (inference)      | 2 per element                  |
//! | layer norm                  | 5 per element                  |
//! | activation, elementwise op  | 1 per element                  |
//! | channel-mask mix            | 3 per element                  |
//! | max pool                    | k² per output element          |
//! | global average pool         | 1 per input element            |
//! | channel split, shuffle, concat | 0                           |
//!
//! MACs count only the multiply-accumulates of convolutions and linear layers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{Model, ModelVariant, MIN_INPUT_SIZE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::layers::LayerDescription;
use crate::params::{Section, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Learnable scalars from the image to the embedding.
    pub feature: usize,
    /// Training-only layer norm and classifier.
    pub head: usize,
    pub total: usize,
}

pub fn count_params(model: &Model) -> ParamCount {
    let s = model.store();
    let feature = s.count_learnable(Some(Section::Feature));
    let head = s.count_learnable(Some(Section::Head));
    ParamCount {
        feature,
        head,
        total: feature + head,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeFlops {
    pub scope: String,
    pub flops: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub input_size: usize,
    pub flops: u64,
    pub macs: u64,
    pub breakdown: Vec<ScopeFlops>,
}

impl FlopCount {
    /// FLOPs of convolutions and linear layers alone (`2·MACs`).
    pub fn conv_flops(&self) -> u64 {
        2 * self.macs
    }
}

/// FLOPs of the feature path for one `input_size × input_size` image.
pub fn count_flops(model: &Model, input_size: usize) -> Result<FlopCount> {
    if input_size < MIN_INPUT_SIZE {
        return Err(Error::InputTooSmall {
            height: input_size,
            width: input_size,
            min: MIN_INPUT_SIZE,
        });
    }
    let g = Graph::new(Mode::Meter);
    let x = g.input(Tensor::zeros(ndarray::IxDyn(&[1, 3, input_size, input_size])));
    model.features(&g, &x)?;
    let breakdown: Vec<ScopeFlops> = g
        .costs()
        .into_iter()
        .map(|c| ScopeFlops {
            scope: c.scope,
            flops: c.flops,
            macs: c.macs,
        })
        .collect();
    Ok(FlopCount {
        input_size,
        flops: breakdown.iter().map(|c| c.flops).sum(),
        macs: breakdown.iter().map(|c| c.macs).sum(),
        breakdown,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub name: String,
    /// Fraction of activations with `|a| > τ`, over the whole batch.
    pub density: f64,
}

/// Fraction of non-zero activations at the input block, after every residual
/// group (or ShuffleNet block) and after every attention module.
pub fn activation_density(model: &Model, images: &Tensor, tau: f64) -> Result<Vec<LayerDensity>> {
    let g = Graph::eval();
    g.enable_probes(tau);
    let x = g.input(images.clone());
    model.features(&g, &x)?;
    Ok(g.probes()
        .into_iter()
        .map(|p| LayerDensity {
            name: p.name,
            density: if p.total == 0 { 0.0 } else { p.active as f64 / p.total as f64 },
        })
        .collect())
}

/// Fraction of entries with `|a| > τ`.
pub fn density_of(values: &Tensor, tau: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|a| a.abs() > tau).count() as f64 / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub variant: ModelVariant,
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub params: ParamCount,
    pub flops: FlopCount,
    pub layers: Vec<LayerDescription>,
    pub densities: Vec<LayerDensity>,
}

impl ProfileReport {
    pub fn gflops(&self) -> f64 {
        self.flops.flops as f64 / 1e9
    }
}

/// Parameters, FLOPs at `input_size` and, if a batch is given, densities.
pub fn profile(model: &Model, input_size: usize, density_batch: Option<(&Tensor, f64)>) -> Result<ProfileReport> {
    let densities = match density_batch {
        Some((images, tau)) => activation_density(model, images, tau)?,
        None => Vec::new(),
    };
    Ok(ProfileReport {
        variant: model.variant(),
        width_multiplier: model.config().width_multiplier,
        num_classes: model.config().num_classes,
        embedding_dim: model.embedding_dim(),
        params: count_params(model),
        flops: count_flops(model, input_size)?,
        layers: model.inventory().to_vec(),
        densities,
    })
}

fn markdown(p: &ProfileReport) -> String {
    let mut s = format!("# Model card: {}\n\n", p.variant);
    s += "| field | value |\n|---|---|\n";
    s += &format!("| variant | {} |\n", p.variant);
    s += &format!("| width multiplier | {} |\n", p.width_multiplier);
    s += &format!("| embedding dim | {} |\n", p.embedding_dim);
    s += &format!("| classes (head) | {} |\n", p.num_classes);
    s += &format!("| params, feature path | {} |\n", p.params.feature);
    s += &format!("| params, head | {} |\n", p.params.head);
    s += &format!("| params, total | {} |\n", p.params.total);
    s += &format!("| input size | {0}×{0} |\n", p.flops.input_size);
    s += &format!("| FLOPs | {} ({:.3} G) |\n", p.flops.flops, p.gflops());
    s += &format!("| MACs | {} |\n\n", p.flops.macs);
    s += "## Layers\n\n| name | kind | section | params |\n|---|---|---|---|\n";
    for l in &p.layers {
        s += &format!("| {} | {:?} | {:?} | {} |\n", l.name, l.kind, l.section, l.param_count);
    }
    s += "\n## FLOPs by scope\n\n| scope | FLOPs | MACs |\n|---|---|---|\n";
    for c in &p.flops.breakdown {
        s += &format!("| {} | {} | {} |\n", if c.scope.is_empty() { "-" } else { &c.scope }, c.flops, c.macs);
    }
    if !p.densities.is_empty() {
        s += "\n## Activation density\n\n| layer | density |\n|---|---|\n";
        for d in &p.densities {
            s += &format!("| {} | {:.4} |\n", d.name, d.density);
        }
    }
    s
}

/// Writes `<stem>.md` and `<stem>.json`; returns both paths.
pub fn emit_model_card(profile: &ProfileReport, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let md = stem.with_extension("md");
    let json = stem.with_extension("json");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&md, markdown(profile)).map_err(|e| Error::io(&md, e))?;
    fs::write(&json, serde_json::to_string_pretty(profile)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok((md, json))
}

pub fn read_model_card(json: &Path) -> Result<ProfileReport> {
    let text = fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
    Ok(serde_json::from_str(&text)?)
}
