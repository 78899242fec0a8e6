use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{ModelGraph, ParamRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub learnable: bool,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Learnable and frozen tensors of one network, plus the non-learnable
/// side-loss weights `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: BTreeMap<String, ParamTensor>,
    pub alpha: Vec<f64>,
    pub seed: u64,
    pub graph_hash: String,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn data(&self, name: &str) -> &[f64] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .data
    }

    /// Fusion weights `h`.
    pub fn fusion_weights(&self) -> &[f64] {
        self.data("fuse.h")
    }

    pub fn learnable_count(&self) -> usize {
        self.tensors.values().filter(|t| t.learnable).map(ParamTensor::len).sum()
    }

    /// Confirms that every parameter the graph declares is present with
    /// the declared shape, and nothing else is.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        if self.graph_hash != graph.config.hash() {
            return Err(Error::Checkpoint(format!(
                "parameters belong to graph {}, not {}",
                self.graph_hash,
                graph.config.hash()
            )));
        }
        let specs = graph.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "graph declares {} tensors, parameters hold {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                Some(t) if t.shape == spec.shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?}, graph expects {:?}",
                        spec.name, t.shape, spec.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("{} missing", spec.name))),
            }
        }
        if self.alpha.len() != graph.num_sides() {
            return Err(Error::Checkpoint(format!(
                "{} side weights for {} sides",
                self.alpha.len(),
                graph.num_sides()
            )));
        }
        Ok(())
    }
}

/// 1-D bilinear interpolation weights for a `2·factor` kernel.
pub fn bilinear_weights_1d(factor: usize) -> Vec<f64> {
    let size = 2 * factor;
    let f = factor as f64;
    let center = f - 0.5;
    (0..size).map(|i| 1.0 - (i as f64 - center).abs() / f).collect()
}

/// Row-major `2f × 2f` bilinear upsampling kernel.
pub fn bilinear_kernel(factor: usize) -> Vec<f64> {
    let w = bilinear_weights_1d(factor);
    w.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect()
}

/// Standard deviation scale for head (tap, message, classifier) kernels.
const HEAD_GAIN: f64 = 0.1;

/// Seeded initialisation: He-normal backbone kernels, small zero-mean head
/// kernels, zero biases, `h = 1/M`, exact bilinear upsampling kernels.
/// Entries present in `pretrained` are copied over after initialisation.
pub fn init_params(graph: &ModelGraph, seed: u64, pretrained: Option<&Params>) -> Result<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = graph.num_sides();
    let mut tensors = BTreeMap::new();
    for spec in graph.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data = match spec.role {
            ParamRole::BackboneWeight | ParamRole::HeadWeight => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let std = if spec.role == ParamRole::BackboneWeight {
                    (2.0 / fan_in as f64).sqrt()
                } else {
                    HEAD_GAIN / (fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            ParamRole::Bias => vec![0.0; n],
            ParamRole::Upsample => bilinear_kernel(spec.shape[0] / 2),
            ParamRole::Fusion => vec![1.0 / m as f64; n],
        };
        tensors.insert(
            spec.name.clone(),
            ParamTensor {
                shape: spec.shape,
                data,
                learnable: spec.learnable,
            },
        );
    }
    if let Some(pre) = pretrained {
        for (name, src) in &pre.tensors {
            if let Some(dst) = tensors.get_mut(name) {
                if dst.shape != src.shape {
                    return Err(Error::Checkpoint(format!(
                        "pretrained {name} has shape {:?}, graph expects {:?}",
                        src.shape, dst.shape
                    )));
                }
                dst.data.clone_from(&src.data);
            }
        }
    }
    Ok(Params {
        tensors,
        alpha: vec![1.0; m],
        seed,
        graph_hash: graph.config.hash(),
    })
}
