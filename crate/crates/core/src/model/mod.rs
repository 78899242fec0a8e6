//! Deeply-supervised segmentation networks: backbone groups, side-output
//! taps, bottom-top and top-bottom short connections, per-side classifiers
//! and the weighted fusion layer.

mod checkpoint;
mod forward;
mod graph;
pub mod ops;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
};
pub use forward::{forward, forward_activations, sigmoid, Activations, Gradients, SideOutputs};
pub use graph::{
    build_graph, Backbone, FuseOn, GraphConfig, ModelGraph, Node, Op, ParamRole, ParamSpec, Variant, DESK_WIDTHS,
    FULL_WIDTHS, TOY_WIDTHS,
};
pub use params::{bilinear_kernel, bilinear_weights_1d, init_params, ParamTensor, Params};
