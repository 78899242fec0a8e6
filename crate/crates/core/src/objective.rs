//! Class-balanced cross-entropy for the side outputs and the fusion layer.
//!
//! For a truth map with vessel set `Y+` and background `Y-` inside the
//! loss region `Y`:
//!
//! ```text
//! l = -(|Y-|/|Y|) Σ_{j∈Y+} log p_j  -  (|Y+|/|Y|) Σ_{j∈Y-} log(1 - p_j)
//! ```
//!
//! Terms are summed over pixels, not averaged. Probabilities are clamped to
//! `[ε, 1-ε]` before the logarithm; inside the clamp the derivative is zero.
//!
//! A region without vessels has `|Y+| = 0`, so both terms vanish: such
//! images (or empty training patches) contribute neither loss nor gradient.

use crate::error::{Error, Result};
use crate::model::{forward_activations, sigmoid, Gradients, ModelGraph, Params, SideOutputs};
use crate::tensor::{check_dims, BinaryMap, Map, Tensor};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub side_losses: Vec<f64>,
    pub fuse_loss: f64,
    pub total: f64,
    /// `|Y-|/|Y|`, applied to vessel pixels.
    pub pos_weight: f64,
    /// `|Y+|/|Y|`, applied to background pixels.
    pub neg_weight: f64,
}

/// `(|Y-|/|Y|, |Y+|/|Y|)` over `region` (whole map when `None`).
pub fn balance_weights(truth: &BinaryMap, region: Option<&BinaryMap>) -> Result<(f64, f64)> {
    let (mut pos, mut total) = (0usize, 0usize);
    match region {
        Some(r) => {
            check_dims(truth, r, "truth vs region")?;
            for (&t, &inside) in truth.data.iter().zip(&r.data) {
                if inside {
                    total += 1;
                    pos += t as usize;
                }
            }
        }
        None => {
            total = truth.len();
            pos = truth.count_ones();
        }
    }
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let neg = total - pos;
    Ok((neg as f64 / total as f64, pos as f64 / total as f64))
}

fn region_iter<'a>(region: Option<&'a BinaryMap>, n: usize) -> Box<dyn Iterator<Item = bool> + 'a> {
    match region {
        Some(r) => Box::new(r.data.iter().copied()),
        None => Box::new(std::iter::repeat_n(true, n)),
    }
}

/// Class-balanced loss of a probability map.
pub fn side_loss(prob: &Map<f64>, truth: &BinaryMap, region: Option<&BinaryMap>) -> Result<f64> {
    check_dims(prob, truth, "prediction vs truth")?;
    let (pw, nw) = balance_weights(truth, region)?;
    Ok(weighted_loss(prob, truth, region, pw, nw))
}

fn weighted_loss(prob: &Map<f64>, truth: &BinaryMap, region: Option<&BinaryMap>, pw: f64, nw: f64) -> f64 {
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    for ((&p, &t), inside) in prob.data.iter().zip(&truth.data).zip(region_iter(region, prob.len())) {
        if !inside {
            continue;
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if t {
            pos_sum -= p.ln();
        } else {
            neg_sum -= (1.0 - p).ln();
        }
    }
    pw * pos_sum + nw * neg_sum
}

/// Loss and its derivative with respect to the pre-sigmoid logits.
fn loss_and_logit_grad(
    logits: &Map<f64>,
    truth: &BinaryMap,
    region: Option<&BinaryMap>,
    pw: f64,
    nw: f64,
) -> (f64, Map<f64>) {
    let probs = logits.map(|&z| sigmoid(z));
    let loss = weighted_loss(&probs, truth, region, pw, nw);
    let grad = probs
        .data
        .iter()
        .zip(&truth.data)
        .zip(region_iter(region, probs.len()))
        .map(|((&p, &t), inside)| {
            if !inside || !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                0.0
            } else if t {
                -pw * (1.0 - p)
            } else {
                nw * p
            }
        })
        .collect();
    (
        loss,
        Map {
            height: logits.height,
            width: logits.width,
            data: grad,
        },
    )
}

/// Deep-supervision objective: `Σ α_m · side_m + fuse`.
pub fn total_loss(
    outputs: &SideOutputs,
    truth: &BinaryMap,
    alpha: &[f64],
    region: Option<&BinaryMap>,
) -> Result<LossBreakdown> {
    if alpha.len() != outputs.side_probs.len() {
        return Err(Error::Shape(format!(
            "{} side weights for {} side outputs",
            alpha.len(),
            outputs.side_probs.len()
        )));
    }
    check_dims(&outputs.fuse_prob, truth, "prediction vs truth")?;
    let (pw, nw) = balance_weights(truth, region)?;
    let side_losses: Vec<f64> = outputs
        .side_probs
        .iter()
        .map(|p| weighted_loss(p, truth, region, pw, nw))
        .collect();
    let fuse_loss = weighted_loss(&outputs.fuse_prob, truth, region, pw, nw);
    let total = side_losses.iter().zip(alpha).map(|(l, a)| a * l).sum::<f64>() + fuse_loss;
    Ok(LossBreakdown {
        side_losses,
        fuse_loss,
        total,
        pos_weight: pw,
        neg_weight: nw,
    })
}

/// Total loss and its exact gradient with respect to every learnable tensor.
pub fn gradients(
    graph: &ModelGraph,
    params: &Params,
    image: &Tensor,
    truth: &BinaryMap,
    alpha: &[f64],
    region: Option<&BinaryMap>,
) -> Result<(LossBreakdown, Gradients)> {
    let acts = forward_activations(graph, params, image)?;
    let outputs = acts.outputs();
    if alpha.len() != outputs.side_logits.len() {
        return Err(Error::Shape(format!(
            "{} side weights for {} side outputs",
            alpha.len(),
            outputs.side_logits.len()
        )));
    }
    check_dims(&outputs.fuse_logit, truth, "prediction vs truth")?;
    let (pw, nw) = balance_weights(truth, region)?;

    let mut side_losses = Vec::with_capacity(alpha.len());
    let mut side_seeds = Vec::with_capacity(alpha.len());
    for (logits, &a) in outputs.side_logits.iter().zip(alpha) {
        let (loss, mut seed) = loss_and_logit_grad(logits, truth, region, pw, nw);
        seed.data.iter_mut().for_each(|g| *g *= a);
        side_losses.push(loss);
        side_seeds.push(seed);
    }
    let (fuse_loss, fuse_seed) = loss_and_logit_grad(&outputs.fuse_logit, truth, region, pw, nw);
    let total = side_losses.iter().zip(alpha).map(|(l, a)| a * l).sum::<f64>() + fuse_loss;
    let grads = acts.backward(&side_seeds, &fuse_seed);
    Ok((
        LossBreakdown {
            side_losses,
            fuse_loss,
            total,
            pos_weight: pw,
            neg_weight: nw,
        },
        grads,
    ))
}
