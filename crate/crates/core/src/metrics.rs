//! Segmentation metrics restricted to field-of-view pixels.
//!
//! ```text
//! SE  = TP / (TP + FN)            SP = TN / (TN + FP)
//! ACC = (TP + TN) / (TP + FN + TN + FP)
//! PR  = TP / (TP + FP)            F1 = 2·PR·SE / (PR + SE)
//! MCC = (TP·TN − FP·FN) / √((TP+FP)(TP+FN)(TN+FP)(TN+FN))
//! ```
//!
//! A zero denominator yields 0 and raises the matching [`Degenerate`] flag.
//! AUC is the Mann–Whitney statistic over all (vessel, background) pairs
//! with ties counted one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::binarize;
use crate::tensor::{check_dims, BinaryMap, Map, ProbMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

/// Which metric denominators were zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degenerate {
    Sensitivity,
    Specificity,
    Precision,
    F1,
    Mcc,
    Auc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub precision: f64,
    pub f1: f64,
    pub mcc: f64,
    pub flags: Vec<Degenerate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub auc: f64,
    pub mcc: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    pub flags: Vec<Degenerate>,
}

/// Confusion counts over pixels with `fov = 1`.
pub fn confusion(pred: &BinaryMap, truth: &BinaryMap, fov: &BinaryMap) -> Result<ConfusionCounts> {
    check_dims(pred, truth, "prediction vs truth")?;
    check_dims(pred, fov, "prediction vs fov")?;
    let mut c = ConfusionCounts::default();
    for ((&p, &t), &inside) in pred.data.iter().zip(&truth.data).zip(&fov.data) {
        if !inside {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.total() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(c)
}

fn ratio(num: f64, den: f64, flag: Degenerate, flags: &mut Vec<Degenerate>) -> f64 {
    if den == 0.0 {
        flags.push(flag);
        0.0
    } else {
        num / den
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let mut flags = Vec::new();
    let se = ratio(tp, tp + fn_, Degenerate::Sensitivity, &mut flags);
    let sp = ratio(tn, tn + fp, Degenerate::Specificity, &mut flags);
    let acc = (tp + tn) / (tp + fn_ + tn + fp);
    let precision = ratio(tp, tp + fp, Degenerate::Precision, &mut flags);
    let f1 = ratio(2.0 * precision * se, precision + se, Degenerate::F1, &mut flags);
    let mcc = ratio(
        tp * tn - fp * fn_,
        ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt(),
        Degenerate::Mcc,
        &mut flags,
    );
    ScalarMetrics {
        se,
        sp,
        acc,
        precision,
        f1,
        mcc,
        flags,
    }
}

/// Scores split by class, restricted to the FOV.
fn class_scores(prob: &ProbMap, truth: &BinaryMap, fov: &BinaryMap) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(prob, truth, "prediction vs truth")?;
    check_dims(prob, fov, "prediction vs fov")?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for ((&p, &t), &inside) in prob.data.iter().zip(&truth.data).zip(&fov.data) {
        if inside {
            if t {
                pos.push(p)
            } else {
                neg.push(p)
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Rank-based AUC: `(R+ − n+(n+ + 1)/2) / (n+ · n−)` with mid-ranks for ties.
pub fn auc(prob: &ProbMap, truth: &BinaryMap, fov: &BinaryMap) -> Result<f64> {
    let (pos, neg) = class_scores(prob, truth, fov)?;
    Ok(auc_from_scores(&pos, &neg))
}

pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank sums are carried doubled so mid-ranks stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let mid2 = (i + j + 2) as u128;
        let n_pos = all[i..=j].iter().filter(|e| e.1).count() as u128;
        pos_rank_sum2 += mid2 * n_pos;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    // U doubled = 2 R+ - n+(n+ + 1)
    let u2 = pos_rank_sum2 - np * (np + 1);
    u2 as f64 / (2 * np * nn) as f64
}

/// One `(1 − SP, SE)` point per threshold, binarising with `p ≥ t`.
pub fn roc_points(prob: &ProbMap, truth: &BinaryMap, fov: &BinaryMap, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (mut pos, mut neg) = class_scores(prob, truth, fov)?;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s < t);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let fpr = above(&neg, t) as f64 / neg.len() as f64;
            let tpr = above(&pos, t) as f64 / pos.len() as f64;
            (fpr, tpr)
        })
        .collect())
}

/// Trapezoidal area under a set of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Every distinct score in the FOV plus one threshold above the maximum.
pub fn full_threshold_grid(prob: &ProbMap, fov: &BinaryMap) -> Vec<f64> {
    let mut t: Vec<f64> = prob
        .data
        .iter()
        .zip(&fov.data)
        .filter(|(_, &f)| f)
        .map(|(&p, _)| p)
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let top = t.last().copied().unwrap_or(0.0);
    t.push(if top.abs() < 1.0 { top + 1.0 } else { top * 2.0 });
    t
}

pub fn evaluate(prob: &ProbMap, truth: &BinaryMap, fov: &BinaryMap, threshold: f64) -> Result<MetricsReport> {
    let counts = confusion(&binarize(prob, threshold), truth, fov)?;
    let s = scalar_metrics(&counts);
    let auc = auc(prob, truth, fov)?;
    Ok(MetricsReport {
        se: s.se,
        sp: s.sp,
        acc: s.acc,
        auc,
        mcc: s.mcc,
        f1: s.f1,
        counts,
        threshold,
        flags: s.flags,
    })
}

/// Like [`evaluate`], but a single-class FOV yields AUC 0 with an
/// [`Degenerate::Auc`] flag instead of an error.
pub fn evaluate_lenient(prob: &ProbMap, truth: &BinaryMap, fov: &BinaryMap, threshold: f64) -> Result<MetricsReport> {
    match evaluate(prob, truth, fov, threshold) {
        Err(Error::UndefinedAuc) => {
            let counts = confusion(&binarize(prob, threshold), truth, fov)?;
            let s = scalar_metrics(&counts);
            let mut flags = s.flags;
            flags.push(Degenerate::Auc);
            Ok(MetricsReport {
                se: s.se,
                sp: s.sp,
                acc: s.acc,
                auc: 0.0,
                mcc: s.mcc,
                f1: s.f1,
                counts,
                threshold,
                flags,
            })
        }
        other => other,
    }
}

/// Macro-average of per-image reports. AUC averages over images where it
/// is defined. Counts are summed.
pub fn macro_average(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let with_auc: Vec<f64> = reports
        .iter()
        .filter(|r| !r.flags.contains(&Degenerate::Auc))
        .map(|r| r.auc)
        .collect();
    let mut flags: Vec<Degenerate> = Vec::new();
    for r in reports {
        for f in &r.flags {
            if !flags.contains(f) {
                flags.push(*f);
            }
        }
    }
    let auc = if with_auc.is_empty() {
        0.0
    } else {
        with_auc.iter().sum::<f64>() / with_auc.len() as f64
    };
    let counts = reports.iter().fold(ConfusionCounts::default(), |a, r| ConfusionCounts {
        tp: a.tp + r.counts.tp,
        fp: a.fp + r.counts.fp,
        tn: a.tn + r.counts.tn,
        fn_: a.fn_ + r.counts.fn_,
    });
    MetricsReport {
        se: mean(|r| r.se),
        sp: mean(|r| r.sp),
        acc: mean(|r| r.acc),
        auc,
        mcc: mean(|r| r.mcc),
        f1: mean(|r| r.f1),
        counts,
        threshold: reports.first().map(|r| r.threshold).unwrap_or(0.5),
        flags,
    }
}

/// Threshold from `candidates` maximising mean F1 over `(prob, truth, fov)`
/// triples. Ties keep the smallest threshold.
pub fn best_f1_threshold(items: &[(ProbMap, BinaryMap, BinaryMap)], candidates: &[f64]) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in candidates {
        let mut sum = 0.0;
        for (p, truth, fov) in items {
            sum += scalar_metrics(&confusion(&binarize(p, t), truth, fov)?).f1;
        }
        if sum > best.0 {
            best = (sum, t);
        }
    }
    Ok(best.1)
}

/// Helper for building maps in tests and examples.
pub fn bits(height: usize, width: usize, values: &[u8]) -> BinaryMap {
    Map::from_vec(height, width, values.iter().map(|&v| v != 0).collect()).expect("bits: size mismatch")
}
