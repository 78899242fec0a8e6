//! Declarative network topology.
//!
//! A [`ModelGraph`] is a list of named nodes in topological order. Every
//! convolution node owns a `<name>.weight` / `<name>.bias` parameter pair,
//! every upsampling node a frozen `<name>.kernel`, and the fusion node the
//! learnable `fuse.h` vector.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "vgg")]
    Vgg,
    #[serde(rename = "resnet")]
    ResNet,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vgg => "vgg",
            Backbone::ResNet => "resnet",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg" | "vgg16" | "vggnet" => Ok(Backbone::Vgg),
            "resnet" | "resnet101" | "resnet-101" => Ok(Backbone::ResNet),
            _ => Err(Error::Config(format!("unknown backbone '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "HED")]
    Hed,
    #[serde(rename = "DSN")]
    Dsn,
    #[serde(rename = "BS-DSN")]
    BsDsn,
    #[serde(rename = "BTS-DSN")]
    BtsDsn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Hed, Variant::Dsn, Variant::BsDsn, Variant::BtsDsn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hed => "HED",
            Variant::Dsn => "DSN",
            Variant::BsDsn => "BS-DSN",
            Variant::BtsDsn => "BTS-DSN",
        }
    }

    /// `(num_sides, bottom_top, top_bottom, hidden_taps)`.
    fn flags(self) -> (usize, bool, bool, bool) {
        match self {
            Variant::Hed => (5, false, false, false),
            Variant::Dsn => (4, false, false, true),
            Variant::BsDsn => (4, true, false, true),
            Variant::BtsDsn => (4, true, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "HED" => Ok(Variant::Hed),
            "DSN" => Ok(Variant::Dsn),
            "BS-DSN" | "BSDSN" => Ok(Variant::BsDsn),
            "BTS-DSN" | "BTSDSN" => Ok(Variant::BtsDsn),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

/// Which maps the fusion layer sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FuseOn {
    #[serde(rename = "logits")]
    Logits,
    #[serde(rename = "probs")]
    Probs,
}

impl FromStr for FuseOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(FuseOn::Logits),
            "probs" => Ok(FuseOn::Probs),
            _ => Err(Error::Config(format!("fuse_on must be 'logits' or 'probs', got '{s}'"))),
        }
    }
}

impl fmt::Display for FuseOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FuseOn::Logits => "logits",
            FuseOn::Probs => "probs",
        })
    }
}

pub const DESK_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const FULL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const TOY_WIDTHS: [usize; 4] = [2, 4, 8, 16];

/// Topology settings. Everything a [`ModelGraph`] is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub backbone: Backbone,
    pub num_sides: usize,
    pub bottom_top: bool,
    pub top_bottom: bool,
    /// 1×1 hidden tap convolutions before each side classifier. Off for HED.
    pub hidden_taps: bool,
    pub tap_channels: usize,
    pub in_channels: usize,
    /// Output channels of each backbone group.
    pub channel_widths: Vec<usize>,
    /// VGG: 3×3 convolutions per group.
    pub vgg_convs: Vec<usize>,
    /// ResNet: bottleneck blocks in res2, res3, res4.
    pub resnet_blocks: Vec<usize>,
    pub fuse_on: FuseOn,
    /// Constant subtracted from every input intensity.
    pub input_mean: f64,
}

impl GraphConfig {
    /// Preset for a named variant at desk-scale widths.
    pub fn for_variant(variant: Variant, backbone: Backbone) -> Self {
        let (num_sides, bottom_top, top_bottom, hidden_taps) = variant.flags();
        let mut widths = DESK_WIDTHS.to_vec();
        if num_sides == 5 {
            widths.push(*widths.last().unwrap());
        }
        Self {
            backbone,
            num_sides,
            bottom_top,
            top_bottom,
            hidden_taps,
            tap_channels: 16,
            in_channels: 3,
            channel_widths: widths,
            vgg_convs: vec![2, 2, 3, 3, 3],
            resnet_blocks: vec![3, 4, 23],
            fuse_on: FuseOn::Logits,
            input_mean: 0.5,
        }
    }

    /// Replaces the first four group widths (the fifth, if any, copies the fourth).
    pub fn with_widths(mut self, widths: [usize; 4]) -> Self {
        let mut w = widths.to_vec();
        if self.num_sides == 5 {
            w.push(widths[3]);
        }
        self.channel_widths = w;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// The named variant these flags correspond to, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let (m, bt, tb, taps) = v.flags();
            m == self.num_sides && bt == self.bottom_top && tb == self.top_bottom && taps == self.hidden_taps
        })
    }

    /// Downsampling factor of each side's backbone group.
    pub fn group_strides(&self) -> Vec<usize> {
        let first = match self.backbone {
            Backbone::Vgg => 1,
            Backbone::ResNet => 2,
        };
        (0..self.num_sides).map(|m| first << m).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_sides == 0 {
            return err("need at least one side output".into());
        }
        if self.channel_widths.len() != self.num_sides {
            return err(format!(
                "{} channel widths for {} sides",
                self.channel_widths.len(),
                self.num_sides
            ));
        }
        if self.channel_widths.contains(&0) || self.tap_channels == 0 || self.in_channels == 0 {
            return err("channel counts must be positive".into());
        }
        match self.backbone {
            Backbone::Vgg => {
                if self.num_sides > 5 {
                    return err("the VGG backbone has at most 5 groups".into());
                }
                if self.vgg_convs.len() < self.num_sides || self.vgg_convs[..self.num_sides].contains(&0) {
                    return err("every VGG group needs at least one convolution".into());
                }
            }
            Backbone::ResNet => {
                if self.num_sides != 4 {
                    return err("the ResNet backbone provides exactly 4 groups (res5 is dropped)".into());
                }
                if self.resnet_blocks.len() != 3 || self.resnet_blocks.contains(&0) {
                    return err("resnet_blocks needs three positive counts (res2, res3, res4)".into());
                }
            }
        }
        if (self.bottom_top || self.top_bottom) && !self.hidden_taps {
            return err("short connections require hidden tap layers".into());
        }
        if self.top_bottom && self.num_sides != 4 {
            return err("the top-bottom connection taps conv4 and needs exactly 4 sides".into());
        }
        if !self.input_mean.is_finite() {
            return err("input_mean must be finite".into());
        }
        Ok(())
    }

    /// Stable hash of the topology, embedded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    MaxPool,
    /// Elementwise sum of two inputs followed by ReLU (residual join).
    AddRelu,
    Concat,
    /// Fixed bilinear transposed convolution by `factor`, cropped to the
    /// input resolution.
    Upsample { factor: usize },
    /// `Σ h_m · x_m` over the side outputs (logits or probabilities).
    Fuse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    pub channels: usize,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
}

/// Shape and trainability of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    BackboneWeight,
    HeadWeight,
    Bias,
    Upsample,
    Fusion,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub config: GraphConfig,
    nodes: Vec<Node>,
    order: Vec<usize>,
    sides: Vec<usize>,
    fuse: usize,
    /// Node feeding each side classifier (feat_conv*_fuse, or the group
    /// output for HED).
    side_features: Vec<usize>,
    /// Index of the last backbone node of each group.
    group_outputs: Vec<usize>,
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<usize>, channels: usize, stride: usize) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
            channels,
            stride,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: impl Into<String>, input: usize, out: usize, kernel: usize, stride: usize, relu: bool) -> usize {
        let s = self.nodes[input].stride * stride;
        self.push(
            name,
            Op::Conv {
                kernel,
                stride,
                pad: kernel / 2,
                relu,
            },
            vec![input],
            out,
            s,
        )
    }

    fn pool(&mut self, name: impl Into<String>, input: usize) -> usize {
        let (c, s) = (self.nodes[input].channels, self.nodes[input].stride * 2);
        self.push(name, Op::MaxPool, vec![input], c, s)
    }

    fn upsample(&mut self, name: impl Into<String>, input: usize) -> usize {
        let (c, factor) = (self.nodes[input].channels, self.nodes[input].stride);
        if factor == 1 {
            return input;
        }
        self.push(name, Op::Upsample { factor }, vec![input], c, 1)
    }

    fn concat(&mut self, name: impl Into<String>, inputs: Vec<usize>) -> usize {
        let c = inputs.iter().map(|&i| self.nodes[i].channels).sum();
        let s = self.nodes[inputs[0]].stride;
        self.push(name, Op::Concat, inputs, c, s)
    }

    fn bottleneck(&mut self, name: &str, input: usize, out: usize, stride: usize) -> usize {
        let mid = (out / 4).max(1);
        let a = self.conv(format!("{name}_branch2a"), input, mid, 1, stride, true);
        let b = self.conv(format!("{name}_branch2b"), a, mid, 3, 1, true);
        let c = self.conv(format!("{name}_branch2c"), b, out, 1, 1, false);
        let shortcut = if self.nodes[input].channels != out || stride != 1 {
            self.conv(format!("{name}_branch1"), input, out, 1, stride, false)
        } else {
            input
        };
        let s = self.nodes[c].stride;
        self.push(name.to_string(), Op::AddRelu, vec![c, shortcut], out, s)
    }
}

/// Builds the graph described by `config`.
pub fn build_graph(config: &GraphConfig) -> Result<ModelGraph> {
    config.validate()?;
    let m = config.num_sides;
    let w = &config.channel_widths;
    let mut b = Builder { nodes: Vec::new() };
    let input = b.push("data", Op::Input, vec![], config.in_channels, 1);

    let mut group_outputs = Vec::with_capacity(m);
    match config.backbone {
        Backbone::Vgg => {
            let mut x = input;
            for g in 0..m {
                if g > 0 {
                    x = b.pool(format!("pool{g}"), x);
                }
                for k in 0..config.vgg_convs[g] {
                    x = b.conv(format!("conv{}_{}", g + 1, k + 1), x, w[g], 3, 1, true);
                }
                group_outputs.push(x);
            }
        }
        Backbone::ResNet => {
            let mut x = b.conv("conv1", input, w[0], 7, 2, true);
            group_outputs.push(x);
            x = b.pool("pool1", x);
            for (g, &blocks) in config.resnet_blocks.iter().enumerate() {
                for k in 0..blocks {
                    let stride = if g > 0 && k == 0 { 2 } else { 1 };
                    let name = format!("res{}_{}", g + 2, k + 1);
                    x = b.bottleneck(&name, x, w[g + 1], stride);
                }
                group_outputs.push(x);
            }
        }
    }

    let mut sides = Vec::with_capacity(m);
    let mut side_features = Vec::with_capacity(m);
    if !config.hidden_taps {
        for (i, &g) in group_outputs.iter().enumerate() {
            let score = b.conv(format!("score{}", i + 1), g, 1, 1, 1, false);
            side_features.push(g);
            sides.push(b.upsample(format!("side{}", i + 1), score));
        }
    } else {
        let feats: Vec<usize> = group_outputs
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let tap = b.conv(format!("tap{}", i + 1), g, config.tap_channels, 1, 1, false);
                b.upsample(format!("feat_conv{}", i + 1), tap)
            })
            .collect();

        let mut fused = Vec::with_capacity(m);
        let first = if config.top_bottom {
            let msg = b.conv("msg_4_1", group_outputs[m - 1], 1, 3, 1, false);
            let up = b.upsample("feat_4_1", msg);
            b.concat("feat_conv1_fuse", vec![feats[0], up])
        } else {
            feats[0]
        };
        fused.push(first);
        for i in 1..m {
            let f = if config.bottom_top {
                let msg = b.conv(format!("msg_{}_{}", i, i + 1), fused[i - 1], 1, 1, 1, false);
                b.concat(format!("feat_conv{}_fuse", i + 1), vec![feats[i], msg])
            } else {
                feats[i]
            };
            fused.push(f);
        }
        for (i, &f) in fused.iter().enumerate() {
            sides.push(b.conv(format!("side{}", i + 1), f, 1, 1, 1, false));
            side_features.push(f);
        }
    }
    let fuse = b.push("fuse", Op::Fuse, sides.clone(), 1, 1);

    let order = topological_order(&b.nodes)?;
    Ok(ModelGraph {
        config: config.clone(),
        nodes: b.nodes,
        order,
        sides,
        fuse,
        side_features,
        group_outputs,
    })
}

/// Kahn's algorithm, lowest index first among ready nodes.
fn topological_order(nodes: &[Node]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for &j in &node.inputs {
            indegree[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Config("network graph contains a cycle".into()));
    }
    Ok(order)
}

impl ModelGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Node indices in execution order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn side_nodes(&self) -> &[usize] {
        &self.sides
    }

    pub fn fuse_node(&self) -> usize {
        self.fuse
    }

    pub fn num_sides(&self) -> usize {
        self.config.num_sides
    }

    /// Feature node consumed by side classifier `m` (0-based).
    pub fn side_feature(&self, m: usize) -> &Node {
        &self.nodes[self.side_features[m]]
    }

    pub fn group_output(&self, m: usize) -> &Node {
        &self.nodes[self.group_outputs[m]]
    }

    pub fn largest_stride(&self) -> usize {
        self.nodes.iter().map(|n| n.stride).max().unwrap_or(1)
    }

    /// Every parameter tensor the graph declares, in node order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Conv { kernel, .. } => {
                    let in_ch = self.nodes[node.inputs[0]].channels;
                    let head = self.is_head(node);
                    specs.push(ParamSpec {
                        name: format!("{}.weight", node.name),
                        shape: vec![node.channels, in_ch, kernel, kernel],
                        learnable: true,
                        role: if head { ParamRole::HeadWeight } else { ParamRole::BackboneWeight },
                    });
                    specs.push(ParamSpec {
                        name: format!("{}.bias", node.name),
                        shape: vec![node.channels],
                        learnable: true,
                        role: ParamRole::Bias,
                    });
                }
                Op::Upsample { factor } => specs.push(ParamSpec {
                    name: format!("{}.kernel", node.name),
                    shape: vec![2 * factor, 2 * factor],
                    learnable: false,
                    role: ParamRole::Upsample,
                }),
                Op::Fuse => specs.push(ParamSpec {
                    name: "fuse.h".into(),
                    shape: vec![self.config.num_sides],
                    learnable: true,
                    role: ParamRole::Fusion,
                }),
                _ => {}
            }
        }
        specs
    }

    fn is_head(&self, node: &Node) -> bool {
        let n = &node.name;
        n.starts_with("tap") || n.starts_with("side") || n.starts_with("score") || n.starts_with("msg_")
    }

    /// Layer/shape table, one line per node in execution order.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "variant={} backbone={} sides={} bottom_top={} top_bottom={} hash={}\n",
            self.config.variant().map(|v| v.name()).unwrap_or("custom"),
            self.config.backbone,
            self.config.num_sides,
            self.config.bottom_top,
            self.config.top_bottom,
            self.config.hash()
        );
        out.push_str(&format!(
            "{:<28} {:<14} {:>8} {:>7}  {:<24} {}\n",
            "layer", "op", "channels", "stride", "inputs", "params"
        ));
        let specs = self.param_specs();
        let mut total = 0usize;
        for &i in &self.order {
            let node = &self.nodes[i];
            let op = match &node.op {
                Op::Input => "input".to_string(),
                Op::Conv { kernel, stride, .. } => format!("conv{kernel}x{kernel}/{stride}"),
                Op::MaxPool => "maxpool2".into(),
                Op::AddRelu => "add+relu".into(),
                Op::Concat => "concat".into(),
                Op::Upsample { factor } => format!("upsample{factor}x"),
                Op::Fuse => "fuse".into(),
            };
            let inputs: Vec<&str> = node.inputs.iter().map(|&j| self.nodes[j].name.as_str()).collect();
            let params: Vec<String> = specs
                .iter()
                .filter(|s| s.name.rsplit_once('.').map(|(n, _)| n) == Some(node.name.as_str()))
                .map(|s| {
                    let count: usize = s.shape.iter().product();
                    if s.learnable {
                        total += count;
                    }
                    format!("{:?}", s.shape)
                })
                .collect();
            out.push_str(&format!(
                "{:<28} {:<14} {:>8} {:>7}  {:<24} {}\n",
                node.name,
                op,
                node.channels,
                node.stride,
                inputs.join(","),
                params.join(" ")
            ));
        }
        out.push_str(&format!("learnable parameters: {total}\n"));
        out
    }
}
