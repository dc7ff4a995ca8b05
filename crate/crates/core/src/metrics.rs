//! Top-k accuracy, spectral-efficiency drop, blocked-class F1 and pose RMSE.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labeling::se_drop;

fn aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::Data(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

/// Position of `target` in the stable ranking by `(−logit, index)`.
pub fn rank_of(logits: &[f32], target: usize) -> usize {
    let lt = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > lt || (v == lt && i < target))
        .count()
}

/// Argmax with ties to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` (row width = `classes`) whose target ranks
/// within the top `k`.
pub fn topk_accuracy(logits: &[f32], classes: usize, targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > classes {
        return Err(CoreError::Data(format!("k = {k} outside 1..={classes}")));
    }
    aligned("topk_accuracy", logits.len() / classes.max(1), targets.len())?;
    if targets.is_empty() {
        return Err(CoreError::Data("topk_accuracy on an empty set".into()));
    }
    let hits = logits
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| rank_of(row, t) < k)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

pub fn mean_se_drop(powers: &[&[f32]], predicted: &[usize], n0_dbm: f64) -> Result<f64> {
    aligned("mean_se_drop", predicted.len(), powers.len())?;
    if powers.is_empty() {
        return Err(CoreError::Data("mean_se_drop on an empty set".into()));
    }
    let mut sum = 0.0;
    for (r, &b) in powers.iter().zip(predicted) {
        sum += se_drop(r, b, n0_dbm)?;
    }
    Ok(sum / powers.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// F1 had a zero denominator and was reported as 0.
    pub f1_undefined: bool,
}

/// Scores for the positive (blocked) class. With `TP = FP = FN = 0`, F1
/// is 0 and flagged undefined; precision/recall with a zero denominator are 0.
pub fn blockage_f1(pred: &[u8], truth: &[u8]) -> Result<BinaryScores> {
    aligned("blockage_f1", pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        correct += usize::from(p == t);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let undefined = tp + fp + fn_ == 0;
    let f1 = if undefined { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok(BinaryScores {
        precision,
        recall,
        f1,
        accuracy: ratio(correct, pred.len()),
        f1_undefined: undefined,
    })
}

/// `sqrt(mean_t ‖ŝ_t − s_t‖²)`.
pub fn pose_rmse(pred: &[[f32; 2]], truth: &[[f32; 2]]) -> Result<f64> {
    aligned("pose_rmse", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(CoreError::Data("pose_rmse on an empty set".into()));
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let dx = p[0] as f64 - t[0] as f64;
            let dy = p[1] as f64 - t[1] as f64;
            dx * dx + dy * dy
        })
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top1: f64,
    pub top3: f64,
    pub se_drop: f64,
    pub blk_accuracy: f64,
    pub precision_blk: f64,
    pub recall_blk: f64,
    pub f1_blk: f64,
    pub f1_undefined: bool,
    pub rmse: f64,
    pub count: usize,
}

/// Model outputs and targets for one split, row-aligned.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    /// `[n × 64]` beam logits.
    pub beam_logits: Vec<f32>,
    pub blk_prob: Vec<f32>,
    pub pose: Vec<[f32; 2]>,
}

pub struct Targets<'a> {
    pub b_star: &'a [usize],
    pub y_blk: &'a [u8],
    pub power: &'a [&'a [f32]],
    pub truth: &'a [[f32; 2]],
    pub n0_dbm: f64,
}

/// Hard blockage decision `q ≥ 0.5`.
pub fn blocked_decision(q: f32) -> u8 {
    u8::from(q >= 0.5)
}

pub fn report(pred: &Predictions, tg: &Targets, classes: usize) -> Result<MetricReport> {
    let n = tg.b_star.len();
    if n == 0 {
        return Err(CoreError::Data("report on an empty split".into()));
    }
    let beams: Vec<usize> = pred.beam_logits.chunks(classes).map(argmax).collect();
    let hard: Vec<u8> = pred.blk_prob.iter().map(|&q| blocked_decision(q)).collect();
    let f1 = blockage_f1(&hard, tg.y_blk)?;
    Ok(MetricReport {
        top1: topk_accuracy(&pred.beam_logits, classes, tg.b_star, 1)?,
        top3: topk_accuracy(&pred.beam_logits, classes, tg.b_star, 3)?,
        se_drop: mean_se_drop(tg.power, &beams, tg.n0_dbm)?,
        blk_accuracy: f1.accuracy,
        precision_blk: f1.precision,
        recall_blk: f1.recall,
        f1_blk: f1.f1,
        f1_undefined: f1.f1_undefined,
        rmse: pose_rmse(&pred.pose, tg.truth)?,
        count: n,
    })
}
