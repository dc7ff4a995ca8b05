//! Oracle beam labels, percentile blockage threshold, SNR and spectral
//! efficiency.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::training::SplitSpec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub percentile: f64,
    pub n0_dbm: f64,
    /// Stored power is dB; otherwise linear milliwatts.
    pub power_in_db: bool,
}

impl LabelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            percentile: cfg.percentile,
            n0_dbm: cfg.n0_dbm,
            power_in_db: cfg.power_in_db,
        }
    }

    pub fn to_db(&self, v: f32) -> f64 {
        if self.power_in_db {
            v as f64
        } else {
            10.0 * libm::log10(v as f64)
        }
    }
}

fn check_finite(r: &[f32]) -> Result<()> {
    if r.is_empty() {
        return Err(CoreError::Data("empty power vector".into()));
    }
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::Data(format!("non-finite power at beam {i}")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn oracle_beam(r: &[f32]) -> Result<usize> {
    check_finite(r)?;
    let mut best = 0;
    for (i, &v) in r.iter().enumerate().skip(1) {
        if v > r[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn max_power(r: &[f32]) -> Result<f32> {
    Ok(r[oracle_beam(r)?])
}

/// Inclusive linear-interpolation percentile: rank `p/100·(n−1)` between
/// the neighbouring order statistics.
pub fn percentile_threshold(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::Data("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(CoreError::Config(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// 1 iff `P^max < τ`; the boundary counts as unblocked.
pub fn blockage_label(p_max: f64, tau: f64) -> u8 {
    u8::from(p_max < tau)
}

pub fn snr_linear(r_db: f64, n0_dbm: f64) -> f64 {
    libm::pow(10.0, (r_db - n0_dbm) / 10.0)
}

/// `log2(1 + SNR)` for a linear SNR.
pub fn se_from_snr(snr: f64) -> f64 {
    libm::log2(1.0 + snr)
}

pub fn se(r_db: f64, n0_dbm: f64) -> f64 {
    se_from_snr(snr_linear(r_db, n0_dbm))
}

/// `SE(b*) − SE(b̂)`, in bits/s/Hz.
pub fn se_drop(r: &[f32], b_hat: usize, n0_dbm: f64) -> Result<f64> {
    let b_star = oracle_beam(r)?;
    if b_hat >= r.len() {
        return Err(CoreError::Data(format!("beam {b_hat} out of range 0..{}", r.len())));
    }
    Ok(se(r[b_star] as f64, n0_dbm) - se(r[b_hat] as f64, n0_dbm))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLabels {
    pub id: u32,
    pub b_star: Vec<u8>,
    pub y_blk: Vec<u8>,
}

/// Contents of `labels.json`. Carries the threshold it was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub tau_db: f64,
    pub percentile: f64,
    pub n0_dbm: f64,
    pub power_in_db: bool,
    pub dataset_hash: String,
    pub split: SplitSpec,
    pub sequences: Vec<SequenceLabels>,
}

impl LabelSet {
    pub fn for_sequence(&self, id: u32) -> Option<&SequenceLabels> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// Fraction of blocked labels over the given sequences.
    pub fn blocked_fraction(&self, ids: &[u32]) -> f64 {
        let (mut n, mut k) = (0usize, 0usize);
        for s in self.sequences.iter().filter(|s| ids.contains(&s.id)) {
            n += s.y_blk.len();
            k += s.y_blk.iter().filter(|&&y| y == 1).count();
        }
        k as f64 / n.max(1) as f64
    }
}

/// Labels every snapshot; τ comes from the training sequences only.
pub fn label_dataset(ds: &Dataset, split: &SplitSpec, lc: &LabelConfig) -> Result<LabelSet> {
    let to_db = |r: &[f32]| -> Result<f64> { Ok(lc.to_db(max_power(r)?)) };
    let mut train_pmax = Vec::new();
    for &id in &split.train {
        let seq = ds.sequence(id).ok_or_else(|| CoreError::Consistency(format!("split names unknown sequence {id}")))?;
        for s in seq {
            train_pmax.push(to_db(&s.power)?);
        }
    }
    let tau = percentile_threshold(&train_pmax, lc.percentile)?;
    let mut sequences = Vec::with_capacity(ds.sequences.len());
    for (entry, seq) in ds.manifest.sequences.iter().zip(&ds.sequences) {
        let mut b_star = Vec::with_capacity(seq.len());
        let mut y_blk = Vec::with_capacity(seq.len());
        for s in seq {
            b_star.push(oracle_beam(&s.power)? as u8);
            y_blk.push(blockage_label(to_db(&s.power)?, tau));
        }
        sequences.push(SequenceLabels { id: entry.id, b_star, y_blk });
    }
    Ok(LabelSet {
        tau_db: tau,
        percentile: lc.percentile,
        n0_dbm: lc.n0_dbm,
        power_in_db: lc.power_in_db,
        dataset_hash: ds.manifest.dataset_hash.clone(),
        split: split.clone(),
        sequences,
    })
}
