//! Sequence splits, the weighted multi-task loss, the optimization loop,
//! plateau learning-rate decay and best-validation checkpoint selection.

use std::fmt::Write as _;

use beamfuse_numerics::{clip_global_norm, AdamW, AdamWConfig, Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::labeling::LabelSet;
use crate::metrics::{report, MetricReport, Predictions, Targets};
use crate::model::{Batch, FusionNet, NormStats, Outputs};
use crate::rng::Rng;
use crate::simulator::codebook::NUM_BEAMS;
use crate::simulator::Snapshot;

/// Sequence ids per split. Sequences are never divided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub fractions: [f64; 3],
}

impl SplitSpec {
    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CoreError::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// Largest-remainder apportionment of `n` items; ties in the fractional
/// part go to the earlier bucket.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Shuffles the ids with `seed`, apportions whole sequences by largest
/// remainder, and guarantees every split with a positive fraction at least
/// one sequence (taken from the largest split).
pub fn split_by_sequence(ids: &[u32], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if ids.len() < 3 {
        return Err(CoreError::Config(format!(
            "splitting by sequence needs at least 3 sequences, got {}",
            ids.len()
        )));
    }
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    Rng::new(seed).shuffle(&mut shuffled);
    let mut counts = largest_remainder(ids.len(), &fractions);
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            if counts[donor] < 2 {
                return Err(CoreError::Config("too few sequences for a non-empty split".into()));
            }
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut rest = shuffled.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        head.to_vec()
    };
    Ok(SplitSpec {
        train: take(counts[0]),
        val: take(counts[1]),
        test: take(counts[2]),
        fractions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beam: f64,
    pub blk: f64,
    pub pose: f64,
    pub pos_weight: f32,
}

/// `n_unblocked / n_blocked` over the given labels.
pub fn pos_weight(y_blk: &[u8]) -> Result<f32> {
    let blocked = y_blk.iter().filter(|&&y| y == 1).count();
    if blocked == 0 || blocked == y_blk.len() {
        return Err(CoreError::Data(format!(
            "pos_weight undefined: {blocked} of {} training labels are blocked",
            y_blk.len()
        )));
    }
    Ok(((y_blk.len() - blocked) as f64 / blocked as f64) as f32)
}

impl LossWeights {
    pub fn new(cfg: &RunConfig, train_labels: &[u8]) -> Result<Self> {
        Ok(Self {
            beam: cfg.lambda_beam,
            blk: cfg.lambda_blk,
            pose: cfg.lambda_pose,
            pos_weight: pos_weight(train_labels)?,
        })
    }
}

/// One labelled snapshot.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub snap: &'a Snapshot,
    pub b_star: usize,
    pub y_blk: u8,
}

/// Samples of the listed sequences in split order, time order within each.
pub fn gather<'a>(ds: &'a Dataset, labels: &LabelSet, ids: &[u32]) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::new();
    for &id in ids {
        let seq = ds.sequence(id).ok_or_else(|| CoreError::Consistency(format!("sequence {id} missing from dataset")))?;
        let lab = labels
            .for_sequence(id)
            .ok_or_else(|| CoreError::Consistency(format!("sequence {id} missing from labels")))?;
        if lab.b_star.len() != seq.len() || lab.y_blk.len() != seq.len() {
            return Err(CoreError::Consistency(format!("labels of sequence {id} do not match its length")));
        }
        out.extend(seq.iter().zip(lab.b_star.iter().zip(&lab.y_blk)).map(|(snap, (&b, &y))| Sample {
            snap,
            b_star: b as usize,
            y_blk: y,
        }));
    }
    Ok(out)
}

/// Scalar loss values, accumulated in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub beam: f64,
    pub blk: f64,
    pub pose: f64,
}

impl LossTerms {
    fn scaled_add(&mut self, o: &LossTerms, w: f64) {
        self.total += o.total * w;
        self.beam += o.beam * w;
        self.blk += o.blk * w;
        self.pose += o.pose * w;
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [("beam", self.beam), ("blockage", self.blk), ("pose", self.pose), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Per-batch supervision in the layout the loss expects.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub b_star: Vec<usize>,
    pub y_blk: Vec<f32>,
    /// `[n, 2]` standardized truth positions.
    pub pose: Tensor,
}

impl BatchTargets {
    pub fn build(samples: &[Sample], stats: &NormStats) -> Self {
        let pose = samples.iter().flat_map(|s| stats.standardize_pose(s.snap.truth)).collect();
        Self {
            b_star: samples.iter().map(|s| s.b_star).collect(),
            y_blk: samples.iter().map(|s| f32::from(s.y_blk)).collect(),
            pose: Tensor::new([samples.len(), 2], pose).expect("two coordinates per sample"),
        }
    }
}

/// λ-weighted sum of beam cross-entropy, weighted blockage BCE and pose MSE.
/// Returns the total's graph node plus every term in f64.
pub fn multitask_loss<T: Real>(
    g: &mut Graph<T>,
    out: &Outputs,
    tg: &BatchTargets,
    w: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let ce = g.cross_entropy(out.beam, &tg.b_star)?;
    let bce = g.bce_with_logits(out.blk, &tg.y_blk, w.pos_weight)?;
    let target = g.constant(tg.pose.cast());
    let mse = g.mse(out.pose, target)?;
    let terms = {
        let (beam, blk, pose) = (g.scalar_f64(ce), g.scalar_f64(bce), g.scalar_f64(mse));
        LossTerms {
            total: w.beam * beam + w.blk * blk + w.pose * pose,
            beam,
            blk,
            pose,
        }
    };
    let a = g.scale(ce, w.beam)?;
    let b = g.scale(bce, w.blk)?;
    let c = g.scale(mse, w.pose)?;
    let ab = g.add(a, b)?;
    Ok((g.add(ab, c)?, terms))
}

/// Targets borrowed from samples, for the metric report.
struct OwnedTargets<'a> {
    b_star: Vec<usize>,
    y_blk: Vec<u8>,
    power: Vec<&'a [f32]>,
    truth: Vec<[f32; 2]>,
}

impl<'a> OwnedTargets<'a> {
    fn new(samples: &[Sample<'a>]) -> Self {
        Self {
            b_star: samples.iter().map(|s| s.b_star).collect(),
            y_blk: samples.iter().map(|s| s.y_blk).collect(),
            power: samples.iter().map(|s| &s.snap.power[..]).collect(),
            truth: samples.iter().map(|s| s.snap.truth).collect(),
        }
    }

    fn report(&self, pred: &Predictions, n0_dbm: f64) -> Result<MetricReport> {
        let tg = Targets {
            b_star: &self.b_star,
            y_blk: &self.y_blk,
            power: &self.power,
            truth: &self.truth,
            n0_dbm,
        };
        report(pred, &tg, NUM_BEAMS)
    }
}

/// Loss and metrics of one pass over a split.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub loss: LossTerms,
    pub metrics: MetricReport,
}

pub struct TrainSettings {
    pub batch: usize,
    pub clip_norm: f32,
    pub seed: u64,
    pub n0_dbm: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn grads_of(g: &Graph, grads: &beamfuse_numerics::Gradients, bound: &beamfuse_numerics::Bound) -> Vec<Tensor> {
    bound
        .vars()
        .iter()
        .map(|&v| {
            let shape = g.value(v).shape().to_vec();
            match grads.get(v) {
                Some(d) => Tensor::new(shape, d.to_vec()).expect("gradient matches parameter"),
                None => Tensor::zeros(shape),
            }
        })
        .collect()
}

/// One pass over `data` in a (seed, epoch)-shuffled order with
/// forward, backward, gradient clipping and an AdamW step per batch.
/// Metrics come from the predictions made during the pass.
pub fn train_epoch(
    net: &mut FusionNet,
    data: &[Sample],
    optim: &mut AdamW,
    weights: &LossWeights,
    set: &TrainSettings,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(CoreError::Data("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(epoch_seed(set.seed, epoch)).shuffle(&mut order);
    let shuffled: Vec<Sample> = order.iter().map(|&i| data[i]).collect();
    let mut sum = LossTerms::default();
    let mut pred = Predictions::default();
    for (bi, chunk) in shuffled.chunks(set.batch.max(1)).enumerate() {
        let snaps: Vec<&Snapshot> = chunk.iter().map(|s| s.snap).collect();
        let batch = Batch::build(&snaps, &net.stats, net.variant)?;
        let tg = BatchTargets::build(chunk, &net.stats);
        let mut g = Graph::<f32>::new();
        let bound = net.params.bind(&mut g);
        let out = net.forward(&mut g, &bound, &batch)?;
        let (loss, terms) = multitask_loss(&mut g, &out, &tg, weights)?;
        if let Some(term) = terms.first_non_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite {term} loss in batch {} of epoch {epoch}",
                bi + 1
            )));
        }
        net.collect(&g, &out, &mut pred);
        let grads = g.backward(loss)?;
        let mut grads = grads_of(&g, &grads, &bound);
        drop(g);
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(CoreError::Numeric(format!("non-finite gradient in batch {} of epoch {epoch}", bi + 1)));
        }
        clip_global_norm(&mut grads, set.clip_norm);
        optim.step(net.params.tensors_mut(), &grads)?;
        sum.scaled_add(&terms, chunk.len() as f64);
    }
    let n = shuffled.len() as f64;
    let mut loss = LossTerms::default();
    loss.scaled_add(&sum, 1.0 / n);
    let metrics = OwnedTargets::new(&shuffled).report(&pred, set.n0_dbm)?;
    Ok(EpochStats { loss, metrics })
}

/// Loss and metrics over a split without touching parameters.
pub fn validate(net: &FusionNet, data: &[Sample], weights: &LossWeights, batch: usize, n0_dbm: f64) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(CoreError::Data("cannot validate on an empty split".into()));
    }
    let mut sum = LossTerms::default();
    let mut pred = Predictions::default();
    for chunk in data.chunks(batch.max(1)) {
        let snaps: Vec<&Snapshot> = chunk.iter().map(|s| s.snap).collect();
        let b = Batch::build(&snaps, &net.stats, net.variant)?;
        let tg = BatchTargets::build(chunk, &net.stats);
        let mut g = Graph::<f32>::new();
        let bound = net.params.bind(&mut g);
        let out = net.forward(&mut g, &bound, &b)?;
        let (_, terms) = multitask_loss(&mut g, &out, &tg, weights)?;
        net.collect(&g, &out, &mut pred);
        sum.scaled_add(&terms, chunk.len() as f64);
    }
    let mut loss = LossTerms::default();
    loss.scaled_add(&sum, 1.0 / data.len() as f64);
    let metrics = OwnedTargets::new(data).report(&pred, n0_dbm)?;
    Ok(EpochStats { loss, metrics })
}

/// Metrics only, for evaluation of a trained network.
pub fn evaluate(net: &FusionNet, data: &[Sample], batch: usize, n0_dbm: f64) -> Result<(Predictions, MetricReport)> {
    if data.is_empty() {
        return Err(CoreError::Data("cannot evaluate an empty split".into()));
    }
    let snaps: Vec<&Snapshot> = data.iter().map(|s| s.snap).collect();
    let pred = net.predict(&snaps, batch)?;
    let rep = OwnedTargets::new(data).report(&pred, n0_dbm)?;
    Ok((pred, rep))
}

/// Reduce-on-plateau schedule over validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn from_run(cfg: &RunConfig) -> Self {
        Self::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr)
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    /// An epoch improves when it beats the best by more than `threshold`;
    /// after more than `patience` epochs without improvement the rate is
    /// multiplied by `factor` (clamped at `min_lr`) and the count restarts.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// 1-based epoch of the minimal validation loss; ties go to the earliest.
pub fn select_checkpoint(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(CoreError::Data("no epochs to select from".into()));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v < history[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: LossTerms,
    pub metrics: MetricReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss,loss_beam,loss_blk,loss_pose,top1,top3,se_drop,f1_blk,rmse,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        let (l, m) = (&self.loss, &self.metrics);
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.8},{:.6},{:.8},{:e}",
            self.epoch,
            self.split.name(),
            l.total,
            l.beam,
            l.blk,
            l.pose,
            m.top1,
            m.top3,
            m.se_drop,
            m.f1_blk,
            m.rmse,
            self.lr
        )
    }
}

pub fn render_log(rows: &[LogRow]) -> String {
    let mut s = String::with_capacity(rows.len() * 96);
    s.push_str(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub rows: Vec<LogRow>,
    pub val_history: Vec<f64>,
}

pub fn adamw_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr as f32,
        beta1: cfg.beta1 as f32,
        beta2: cfg.beta2 as f32,
        eps: cfg.adam_eps as f32,
        weight_decay: cfg.weight_decay as f32,
    }
}

/// Trains for `cfg.epochs` epochs and keeps the best-validation parameters.
/// The log starts with an epoch-0 validation row of the untrained network.
/// `progress` sees every row as it is produced.
pub fn fit(
    net: &mut FusionNet,
    train: &[Sample],
    val: &[Sample],
    weights: &LossWeights,
    cfg: &RunConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let set = TrainSettings {
        batch: cfg.batch,
        clip_norm: cfg.clip_norm as f32,
        seed: cfg.seed,
        n0_dbm: cfg.n0_dbm,
    };
    let mut optim = AdamW::new(adamw_config(cfg), net.params.tensors());
    let mut plateau = Plateau::from_run(cfg);
    let mut rows = Vec::with_capacity(2 * cfg.epochs + 1);
    let mut push = |row: LogRow, rows: &mut Vec<LogRow>| {
        progress(&row);
        rows.push(row);
    };
    let init = validate(net, val, weights, set.batch, set.n0_dbm)?;
    push(
        LogRow {
            epoch: 0,
            split: Split::Val,
            loss: init.loss,
            metrics: init.metrics,
            lr: plateau.lr,
        },
        &mut rows,
    );
    let mut best = net.params.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = plateau.lr;
        optim.set_lr(lr as f32);
        let tr = train_epoch(net, train, &mut optim, weights, &set, epoch)?;
        push(
            LogRow {
                epoch,
                split: Split::Train,
                loss: tr.loss,
                metrics: tr.metrics,
                lr,
            },
            &mut rows,
        );
        let va = validate(net, val, weights, set.batch, set.n0_dbm)?;
        if va.loss.first_non_finite().is_some() {
            return Err(CoreError::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        if history.iter().all(|&h| va.loss.total < h) {
            best = net.params.clone();
        }
        history.push(va.loss.total);
        push(
            LogRow {
                epoch,
                split: Split::Val,
                loss: va.loss,
                metrics: va.metrics,
                lr,
            },
            &mut rows,
        );
        plateau.step(va.loss.total);
    }
    let best_epoch = select_checkpoint(&history)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        rows,
        val_history: history,
    })
}
