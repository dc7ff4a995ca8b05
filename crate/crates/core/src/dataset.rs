//! On-disk dataset: `manifest.json` plus one `seq_<id>.bin` of fixed-size
//! little-endian records per sequence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{hex_hash, RunConfig};
use crate::error::{CoreError, Result};
use crate::simulator::codebook::NUM_BEAMS;
use crate::simulator::sensors::{IMAGE_LEN, LIDAR_POINTS, RADAR_LEN};
use crate::simulator::Snapshot;

const FLOATS: usize = IMAGE_LEN + 3 * LIDAR_POINTS + RADAR_LEN + 2 + 2 * NUM_BEAMS + 2;
/// f32 fields, `t: u32`, `blocked_geom: u8`, zero padding to 4 bytes.
pub const RECORD_SIZE: usize = (FLOATS * 4 + 4 + 1).div_ceil(4) * 4;
pub const FORMAT: &str = "beamfuse-dataset-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: u32,
    pub count: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub record_size: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub sequences: Vec<SequenceEntry>,
    pub total: usize,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, sequences: Vec<SequenceEntry>) -> Self {
        Self {
            format: FORMAT.into(),
            record_size: RECORD_SIZE,
            seed: cfg.seed,
            dataset_hash: hex_hash(cfg.dataset_hash()),
            config_hash: hex_hash(cfg.config_hash()),
            config: cfg.entries().into_iter().map(|(k, _, v)| (k.to_string(), v)).collect(),
            total: sequences.iter().map(|s| s.count).sum(),
            sequences,
        }
    }

    /// Rebuilds the generating config from the echoed keys.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Writes `bytes` to `path.tmp` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CoreError::format(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::format(path.display().to_string(), e))
}

pub fn encode_record(s: &Snapshot, out: &mut Vec<u8>) {
    let start = out.len();
    let fields: [&[f32]; 7] = [&s.image, &s.lidar, &s.radar, &s.gnss, &s.power, &s.prev_power, &s.truth];
    for f in fields {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&s.t.to_le_bytes());
    out.push(s.blocked_geom as u8);
    out.resize(start + RECORD_SIZE, 0);
}

pub fn decode_record(bytes: &[u8], seq_id: u32) -> Snapshot {
    debug_assert_eq!(bytes.len(), RECORD_SIZE);
    let mut off = 0;
    let mut take = |n: usize| -> Vec<f32> {
        let v = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += 4 * n;
        v
    };
    let image = take(IMAGE_LEN);
    let lidar = take(3 * LIDAR_POINTS);
    let radar = take(RADAR_LEN);
    let gnss = take(2);
    let power = take(NUM_BEAMS);
    let prev = take(NUM_BEAMS);
    let truth = take(2);
    let o = FLOATS * 4;
    Snapshot {
        seq_id,
        t: u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]),
        image,
        lidar,
        radar,
        gnss: [gnss[0], gnss[1]],
        power: power.try_into().expect("fixed length"),
        prev_power: prev.try_into().expect("fixed length"),
        truth: [truth[0], truth[1]],
        blocked_geom: bytes[o + 4] != 0,
    }
}

pub fn sequence_file(id: u32) -> String {
    format!("seq_{id}.bin")
}

pub fn write_sequence(root: &Path, id: u32, snaps: &[Snapshot]) -> Result<SequenceEntry> {
    let mut buf = Vec::with_capacity(snaps.len() * RECORD_SIZE);
    for s in snaps {
        encode_record(s, &mut buf);
    }
    let file = sequence_file(id);
    write_atomic(&root.join(&file), &buf)?;
    Ok(SequenceEntry {
        id,
        count: snaps.len(),
        file,
    })
}

pub fn read_sequence(root: &Path, entry: &SequenceEntry, record_size: usize) -> Result<Vec<Snapshot>> {
    if record_size != RECORD_SIZE {
        return Err(CoreError::format("manifest", format!("record size {record_size}, expected {RECORD_SIZE}")));
    }
    let path = root.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    if bytes.len() != entry.count * RECORD_SIZE {
        return Err(CoreError::format(
            path.display().to_string(),
            format!("{} bytes for {} records", bytes.len(), entry.count),
        ));
    }
    Ok(bytes.chunks_exact(RECORD_SIZE).map(|r| decode_record(r, entry.id)).collect())
}

/// A fully loaded dataset, sequences in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<Vec<Snapshot>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.format != FORMAT {
            return Err(CoreError::format("manifest", format!("unknown format `{}`", manifest.format)));
        }
        let sequences = manifest
            .sequences
            .iter()
            .map(|e| read_sequence(root, e, manifest.record_size))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, sequences })
    }

    pub fn sequence(&self, id: u32) -> Option<&[Snapshot]> {
        self.manifest.sequences.iter().position(|e| e.id == id).map(|i| self.sequences[i].as_slice())
    }

    pub fn total(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_size_is_aligned() {
        assert_eq!(RECORD_SIZE, 19992);
        assert_eq!(RECORD_SIZE % 4, 0);
    }
}
