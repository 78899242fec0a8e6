//! Deeply-supervised retinal vessel segmentation with short connections.
//!
//! The crate covers the whole experimental pipeline:
//!
//! * [`dataio`]: dataset layouts, fixed splits, FOV masks, map persistence
//! * [`augment`]: fixed geometric augmentation plans
//! * [`model`]: the configurable network graph and its forward/backward pass
//! * [`objective`]: class-balanced side and fusion losses with gradients
//! * [`trainer`]: SGD with momentum and weight decay, validation selection
//! * [`inference`]: image-level and 9-patch prediction, binarisation
//! * [`metrics`]: SE, SP, ACC, AUC, MCC and F1 inside the field of view
//! * [`experiment`]: configs and the train/eval/ablation/cross-training runs

pub mod augment;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod resample;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{BinaryMap, Map, ProbMap, Tensor};

// The guide's code listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
