//! The five model variants, the pooled feature head and the layer-norm loss neck.
//!
//! | variant  | trunk               | global attention | local attention            |
//! |----------|---------------------|------------------|----------------------------|
//! | Baseline | ResNet-50           | no               | none                       |
//! | Large    | ResNet-50           | yes              | output of every stage      |
//! | Medium   | ResNet-34           | yes              | output of stage 1          |
//! | Small    | ResNet-18           | yes              | output of stage 1          |
//! | Micro    | ShuffleNet-v2+      | yes              | after the first block, followed by an extra Shuffle-Xception block |
//!
//! No variant has a dense layer between the image and the embedding: the
//! re-id feature is the global average of the last conv output. During
//! training a layer norm and a single linear classifier turn that feature
//! into logits; the classifier is never part of the exported feature path.

pub mod resnet;
pub mod shufflenet;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::attention::{MaskMode, DEFAULT_DBAM_DEPTH, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Builder, LayerDescription, LayerKind, LayerNorm, Linear};
use crate::ops;
use crate::params::{ParamStore, Section, Tensor};

use resnet::{Depth, ResNet, ResNetSpec};
use shufflenet::{ShuffleNet, ShuffleSpec};

/// Smallest square input every backbone accepts (total stride 32).
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Baseline,
    Large,
    Medium,
    Small,
    Micro,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Baseline,
        ModelVariant::Large,
        ModelVariant::Medium,
        ModelVariant::Small,
        ModelVariant::Micro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Large => "large",
            ModelVariant::Medium => "medium",
            ModelVariant::Small => "small",
            ModelVariant::Micro => "micro",
        }
    }

    /// Training and profiling resolution.
    pub fn default_input_size(self) -> usize {
        match self {
            ModelVariant::Micro => 224,
            _ => 350,
        }
    }

    fn default_local_stages(self) -> Vec<usize> {
        match self {
            ModelVariant::Baseline => vec![],
            ModelVariant::Large => vec![0, 1, 2, 3],
            _ => vec![0],
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("model.variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Number of training identities `N` seen by the classifier.
    pub num_classes: usize,
    pub global_attention: bool,
    /// Zero-based stages that receive DBAM local attention.
    pub local_attention_stages: Vec<usize>,
    pub input_size: usize,
    /// Channel-width scale; 1.0 is the full-size architecture.
    pub width_multiplier: f64,
    /// Depthwise layers inside each DBAM block.
    pub dbam_depth: usize,
    pub leaky_slope: f64,
    pub mask_mode: MaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(ModelVariant::Small, 576)
    }
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            num_classes,
            global_attention: variant != ModelVariant::Baseline,
            local_attention_stages: variant.default_local_stages(),
            input_size: variant.default_input_size(),
            width_multiplier: 1.0,
            dbam_depth: DEFAULT_DBAM_DEPTH,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            mask_mode: MaskMode::Soft,
        }
    }

    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Width of the pooled re-id feature (the last conv layer's channel count).
    pub fn embedding_dim(&self) -> usize {
        match self.variant {
            ModelVariant::Micro => self.shuffle_spec().out_channels(),
            _ => self.resnet_spec().out_channels(),
        }
    }

    fn resnet_spec(&self) -> ResNetSpec {
        let depth = match self.variant {
            ModelVariant::Medium => Depth::R34,
            ModelVariant::Small => Depth::R18,
            _ => Depth::R50,
        };
        ResNetSpec {
            depth,
            width_multiplier: self.width_multiplier,
            global_attention: self.global_attention,
            local_attention_stages: self.local_attention_stages.clone(),
            dbam_depth: self.dbam_depth,
            leaky_slope: self.leaky_slope,
            mask_mode: self.mask_mode,
        }
    }

    fn shuffle_spec(&self) -> ShuffleSpec {
        ShuffleSpec {
            width_multiplier: self.width_multiplier,
            global_attention: self.global_attention,
            local_attention_stages: self.local_attention_stages.clone(),
            dbam_depth: self.dbam_depth,
            leaky_slope: self.leaky_slope,
            mask_mode: self.mask_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "at least 2 identities are required"));
        }
        if let Some(&bad) = self.local_attention_stages.iter().find(|&&s| s >= 4) {
            return Err(Error::config(
                "model.local_attention_stages",
                format!("stage index {bad} does not exist (backbones have stages 0..=3)"),
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("model.width_multiplier", "must be positive"));
        }
        if self.input_size < MIN_INPUT_SIZE {
            return Err(Error::config(
                "model.input_size",
                format!("must be at least {MIN_INPUT_SIZE}"),
            ));
        }
        if self.dbam_depth == 0 {
            return Err(Error::config("model.dbam_depth", "must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("model.leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Trunk {
    ResNet(ResNet),
    Shuffle(ShuffleNet),
}

#[derive(Clone, Debug)]
struct Head {
    norm: LayerNorm,
    classifier: Linear,
}

/// A built network: parameters, layer inventory and forward functions.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    inventory: Vec<LayerDescription>,
    trunk: Trunk,
    head: Head,
}

/// Pooled re-id features with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    /// `batch × embedding_dim`
    pub features: Array2<f64>,
    pub identities: Vec<u64>,
    pub cameras: Vec<u64>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds a model with fan-in–scaled random weights; identical seeds give identical models.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder::new(seed);
    let trunk = match config.variant {
        ModelVariant::Micro => Trunk::Shuffle(ShuffleNet::build(&mut b, &config.shuffle_spec())),
        _ => Trunk::ResNet(ResNet::build(&mut b, &config.resnet_spec())),
    };
    b.record("global_avg_pool", LayerKind::GlobalAvgPool, &[]);
    b.set_section(Section::Head);
    let dim = config.embedding_dim();
    let head = Head {
        norm: LayerNorm::new(&mut b, "neck.layer_norm", dim),
        classifier: Linear::new(&mut b, "classifier", dim, config.num_classes),
    };
    Ok(Model {
        config: config.clone(),
        seed,
        store: b.store,
        inventory: b.inventory,
        trunk,
        head,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected images [N, 3, H, W], got {shape:?}")));
        }
        if shape[2] < MIN_INPUT_SIZE || shape[3] < MIN_INPUT_SIZE {
            return Err(Error::InputTooSmall {
                height: shape[2],
                width: shape[3],
                min: MIN_INPUT_SIZE,
            });
        }
        Ok(())
    }

    /// Pooled pre-norm features `[N, D]` on the graph.
    pub fn features<'g>(&self, g: &'g Graph, images: &Var<'g>) -> Result<Var<'g>> {
        self.check_images(images.shape())?;
        let fmap = match &self.trunk {
            Trunk::ResNet(r) => r.forward(g, &self.store, images),
            Trunk::Shuffle(s) => s.forward(g, &self.store, images),
        };
        let _scope = g.scope("global_avg_pool");
        Ok(ops::global_avg_pool(&fmap))
    }

    /// Layer norm followed by the linear classifier.
    pub fn logits<'g>(&self, g: &'g Graph, features: &Var<'g>) -> Result<Var<'g>> {
        let dim = self.embedding_dim();
        if features.shape().len() != 2 || features.shape()[1] != dim {
            return Err(Error::Shape(format!(
                "classifier expects [N, {dim}] embeddings, got {:?}",
                features.shape()
            )));
        }
        let _scope = g.scope("head");
        let normed = self.head.norm.forward(g, &self.store, features);
        Ok(self.head.classifier.forward(g, &self.store, &normed))
    }

    /// Post-norm features (the classifier input).
    pub fn normalized<'g>(&self, g: &'g Graph, features: &Var<'g>) -> Var<'g> {
        self.head.norm.forward(g, &self.store, features)
    }

    pub fn inventory(&self) -> &[LayerDescription] {
        &self.inventory
    }
}

/// Inference-mode embeddings for a batch of images `[N, 3, H, W]`.
pub fn forward_features(model: &Model, images: &Tensor) -> Result<Array2<f64>> {
    let g = Graph::eval();
    let x = g.input(images.clone());
    let f = model.features(&g, &x)?;
    let out = f.value().clone().into_dimensionality::<Ix2>().expect("pooled features are 2-D");
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding contains NaN or infinity".into()));
    }
    Ok(out)
}

/// Classifier logits `[N, num_classes]` for pre-norm embeddings.
pub fn forward_classifier(model: &Model, emb: &Array2<f64>) -> Result<Array2<f64>> {
    let g = Graph::eval();
    let x = g.input(emb.clone().into_dyn());
    let logits = model.logits(&g, &x)?;
    Ok(logits.value().clone().into_dimensionality::<Ix2>().expect("logits are 2-D"))
}

/// The ordered layer inventory of a model.
pub fn describe_model(model: &Model) -> Vec<LayerDescription> {
    model.inventory.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("huge".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let mut c = ModelConfig::new(ModelVariant::Small, 10);
        c.local_attention_stages = vec![4];
        match build_model(&c, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.local_attention_stages"),
            other => panic!("unexpected {other:?}"),
        }
        let c = ModelConfig::new(ModelVariant::Small, 1);
        assert!(matches!(build_model(&c, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn embedding_dims_follow_the_last_conv() {
        assert_eq!(ModelConfig::new(ModelVariant::Large, 5).embedding_dim(), 2048);
        assert_eq!(ModelConfig::new(ModelVariant::Baseline, 5).embedding_dim(), 2048);
        assert_eq!(ModelConfig::new(ModelVariant::Medium, 5).embedding_dim(), 512);
        assert_eq!(ModelConfig::new(ModelVariant::Small, 5).embedding_dim(), 512);
        assert_eq!(ModelConfig::new(ModelVariant::Micro, 5).embedding_dim(), 1280);
    }
}
