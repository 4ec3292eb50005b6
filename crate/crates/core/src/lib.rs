pub mod attention;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod instrumentation;
pub mod layers;
pub mod losses;
pub mod ops;
pub mod params;
pub mod training;

pub use backbones::{build_model, describe_model, forward_classifier, forward_features, EmbeddingBatch, Model, ModelConfig, ModelVariant};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/instrumentation.md")]
    mod instrumentation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
