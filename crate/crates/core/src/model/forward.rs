//! Forward evaluation of a [`ModelGraph`] and reverse-mode gradients.
//!
//! The forward pass keeps every node's activation (plus the max-pool
//! switches) so that [`Activations::backward`] can run the adjoint of each
//! node in reverse execution order.

use std::collections::BTreeMap;

use super::graph::{FuseOn, ModelGraph, Op};
use super::ops::{self, ConvGeometry};
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::{Map, Tensor};

/// Per-side and fused maps for one input, all at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SideOutputs {
    pub side_logits: Vec<Map<f64>>,
    pub side_probs: Vec<Map<f64>>,
    pub fuse_logit: Map<f64>,
    pub fuse_prob: Map<f64>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient of a scalar objective with respect to every learnable tensor.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Node activations retained from one forward pass.
pub struct Activations<'a> {
    graph: &'a ModelGraph,
    params: &'a Params,
    values: Vec<Tensor>,
    pool_switches: Vec<Option<Vec<usize>>>,
    /// Side probabilities fed to the fusion layer when fusing probabilities.
    side_sigmoids: Option<Vec<Tensor>>,
}

fn check_input(graph: &ModelGraph, image: &Tensor) -> Result<()> {
    let cfg = &graph.config;
    if image.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "network expects {} input channels, image has {}",
            cfg.in_channels, image.channels
        )));
    }
    let s = graph.largest_stride();
    if image.height < s || image.width < s {
        return Err(Error::Shape(format!(
            "input {}x{} is smaller than the largest stride {s}",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Runs the network and keeps the activations for backpropagation.
pub fn forward_activations<'a>(graph: &'a ModelGraph, params: &'a Params, image: &Tensor) -> Result<Activations<'a>> {
    check_input(graph, image)?;
    let nodes = graph.nodes();
    let (h, w) = (image.height, image.width);
    let mut values: Vec<Tensor> = vec![Tensor::zeros(0, 0, 0); nodes.len()];
    let mut switches = vec![None; nodes.len()];
    let mut side_sigmoids = None;

    for &i in graph.order() {
        let node = &nodes[i];
        let value = match &node.op {
            Op::Input => {
                let mean = graph.config.input_mean;
                let mut t = image.clone();
                t.data.iter_mut().for_each(|v| *v -= mean);
                t
            }
            Op::Conv {
                kernel,
                stride,
                pad,
                relu,
            } => {
                let x = &values[node.inputs[0]];
                let g = ConvGeometry {
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                let weight = params.data(&format!("{}.weight", node.name));
                let bias = params.data(&format!("{}.bias", node.name));
                let mut out = ops::conv2d(x, weight, bias, node.channels, g);
                if *relu {
                    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                out
            }
            Op::MaxPool => {
                let (out, arg) = ops::maxpool2(&values[node.inputs[0]]);
                switches[i] = Some(arg);
                out
            }
            Op::AddRelu => {
                let (a, b) = (&values[node.inputs[0]], &values[node.inputs[1]]);
                debug_assert!(a.same_shape(b));
                let data = a.data.iter().zip(&b.data).map(|(x, y)| (x + y).max(0.0)).collect();
                Tensor {
                    channels: a.channels,
                    height: a.height,
                    width: a.width,
                    data,
                }
            }
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j]).collect();
                let (ph, pw) = (parts[0].height, parts[0].width);
                let mut data = Vec::with_capacity(node.channels * ph * pw);
                for p in parts {
                    data.extend_from_slice(&p.data);
                }
                Tensor::from_vec(node.channels, ph, pw, data)?
            }
            Op::Upsample { factor } => {
                let kernel = params.data(&format!("{}.kernel", node.name));
                ops::upsample(&values[node.inputs[0]], kernel, *factor, h, w)
            }
            Op::Fuse => {
                let hw = params.fusion_weights();
                let mut out = Tensor::zeros(1, h, w);
                let inputs: Vec<Tensor> = match graph.config.fuse_on {
                    FuseOn::Logits => node.inputs.iter().map(|&j| values[j].clone()).collect(),
                    FuseOn::Probs => {
                        let probs: Vec<Tensor> = node
                            .inputs
                            .iter()
                            .map(|&j| {
                                let mut t = values[j].clone();
                                t.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                                t
                            })
                            .collect();
                        side_sigmoids = Some(probs.clone());
                        probs
                    }
                };
                for (m, x) in inputs.iter().enumerate() {
                    for (o, v) in out.data.iter_mut().zip(&x.data) {
                        *o += hw[m] * v;
                    }
                }
                out
            }
        };
        values[i] = value;
    }

    Ok(Activations {
        graph,
        params,
        values,
        pool_switches: switches,
        side_sigmoids,
    })
}

fn to_map(t: &Tensor) -> Map<f64> {
    Map {
        height: t.height,
        width: t.width,
        data: t.data.clone(),
    }
}

impl Activations<'_> {
    pub fn value(&self, node: usize) -> &Tensor {
        &self.values[node]
    }

    pub fn outputs(&self) -> SideOutputs {
        let side_logits: Vec<Map<f64>> = self
            .graph
            .side_nodes()
            .iter()
            .map(|&i| to_map(&self.values[i]))
            .collect();
        let side_probs = side_logits.iter().map(|m| m.map(|&z| sigmoid(z))).collect();
        let fuse_logit = to_map(&self.values[self.graph.fuse_node()]);
        let fuse_prob = fuse_logit.map(|&z| sigmoid(z));
        SideOutputs {
            side_logits,
            side_probs,
            fuse_logit,
            fuse_prob,
        }
    }

    /// Backpropagates seeds given on the side-logit maps and the fused
    /// logit map, returning gradients for every learnable tensor.
    pub fn backward(&self, side_seeds: &[Map<f64>], fuse_seed: &Map<f64>) -> Gradients {
        let graph = self.graph;
        let nodes = graph.nodes();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut out = Gradients::new();

        let accumulate = |grads: &mut Vec<Option<Tensor>>, i: usize, g: Tensor| match &mut grads[i] {
            Some(existing) => existing.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };

        for (&i, seed) in graph.side_nodes().iter().zip(side_seeds) {
            accumulate(&mut grads, i, Tensor::from(seed.clone()));
        }
        accumulate(&mut grads, graph.fuse_node(), Tensor::from(fuse_seed.clone()));

        for &i in graph.order().iter().rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    kernel,
                    stride,
                    pad,
                    relu,
                } => {
                    let mut g = g;
                    if *relu {
                        let y = &self.values[i];
                        g.data.iter_mut().zip(&y.data).for_each(|(gv, &yv)| {
                            if yv <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    }
                    let input = node.inputs[0];
                    let need_input = !matches!(nodes[input].op, Op::Input);
                    let geom = ConvGeometry {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    };
                    let weight = self.params.data(&format!("{}.weight", node.name));
                    let (gi, gw, gb) = ops::conv2d_backward(&self.values[input], weight, &g, geom, need_input);
                    out.insert(format!("{}.weight", node.name), gw);
                    out.insert(format!("{}.bias", node.name), gb);
                    if let Some(gi) = gi {
                        accumulate(&mut grads, input, gi);
                    }
                }
                Op::MaxPool => {
                    let input = node.inputs[0];
                    let arg = self.pool_switches[i].as_ref().expect("pool switches recorded");
                    let gi = ops::maxpool2_backward(self.values[input].shape(), arg, &g);
                    accumulate(&mut grads, input, gi);
                }
                Op::AddRelu => {
                    let mut g = g;
                    let y = &self.values[i];
                    g.data.iter_mut().zip(&y.data).for_each(|(gv, &yv)| {
                        if yv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads, node.inputs[1], g.clone());
                    accumulate(&mut grads, node.inputs[0], g);
                }
                Op::Concat => {
                    let mut offset = 0;
                    let plane = g.plane_len();
                    for &j in &node.inputs {
                        let c = nodes[j].channels;
                        let part = Tensor::from_vec(
                            c,
                            g.height,
                            g.width,
                            g.data[offset * plane..(offset + c) * plane].to_vec(),
                        )
                        .expect("concat slice");
                        offset += c;
                        accumulate(&mut grads, j, part);
                    }
                }
                Op::Upsample { factor } => {
                    let input = node.inputs[0];
                    let kernel = self.params.data(&format!("{}.kernel", node.name));
                    let gi = ops::upsample_backward(self.values[input].shape(), kernel, *factor, &g);
                    accumulate(&mut grads, input, gi);
                }
                Op::Fuse => {
                    let hw = self.params.fusion_weights();
                    let mut gh = Vec::with_capacity(node.inputs.len());
                    for (m, &j) in node.inputs.iter().enumerate() {
                        let x = match &self.side_sigmoids {
                            Some(s) => &s[m],
                            None => &self.values[j],
                        };
                        gh.push(g.data.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>());
                        let mut gx = g.clone();
                        match &self.side_sigmoids {
                            None => gx.data.iter_mut().for_each(|v| *v *= hw[m]),
                            Some(s) => gx
                                .data
                                .iter_mut()
                                .zip(&s[m].data)
                                .for_each(|(v, p)| *v *= hw[m] * p * (1.0 - p)),
                        }
                        accumulate(&mut grads, j, gx);
                    }
                    out.insert("fuse.h".into(), gh);
                }
            }
        }

        // learnable tensors that received no signal get explicit zeros
        for (name, t) in &self.params.tensors {
            if t.learnable {
                out.entry(name.clone()).or_insert_with(|| vec![0.0; t.len()]);
            }
        }
        out
    }
}

/// Evaluates the network on one image.
pub fn forward(graph: &ModelGraph, params: &Params, image: &Tensor) -> Result<SideOutputs> {
    Ok(forward_activations(graph, params, image)?.outputs())
}
