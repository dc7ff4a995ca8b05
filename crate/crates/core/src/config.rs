//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Which stage a key influences. Keys of the first three groups determine
/// the dataset and its labels and feed [`RunConfig::dataset_hash`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Gen,
    Label,
    Split,
    Model,
    Train,
    Map,
}

impl Group {
    pub fn shapes_dataset(self) -> bool {
        matches!(self, Group::Gen | Group::Label | Group::Split)
    }
}

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }

    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }

    fn render(&self) -> String {
        self.to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_value(value).ok_or_else(|| CoreError::Config(format!("bad value `{value}` for `{key}`")))
}

macro_rules! run_config {
    ($( $group:ident { $( $(#[$m:meta])* $key:ident : $ty:ty = $default:expr, )* } )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $( $(#[$m])* pub $key: $ty, )* )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $( $key: $default, )* )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [(&'static str, Group)] = &[
                $( $( (stringify!($key), Group::$group), )* )*
            ];

            /// Sets one key from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $( stringify!($key) => self.$key = parse_value(key, value)?, )* )*
                    _ => return Err(CoreError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its group and canonical text value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, Group, String)> {
                vec![ $( $( (stringify!($key), Group::$group, ConfigValue::render(&self.$key)), )* )* ]
            }
        }
    };
}

run_config! {
    Gen {
        seed: u64 = 7,
        sequences: usize = 12,
        snapshots: usize = 500,
        /// Snapshot period, seconds.
        dt: f64 = 0.1,
        speed_min: f64 = 8.0,
        speed_max: f64 = 14.0,
        static_blockers: usize = 1,
        dynamic_blockers: usize = 1,
        n_ant: usize = 16,
        /// Received power at the reference distance, dB.
        p0_db: f64 = -40.0,
        d0_m: f64 = 10.0,
        blockage_db: f64 = 25.0,
        shadow_db: f64 = 1.0,
        /// Wall reflection power relative to the direct path, dB.
        reflection_db: f64 = -10.0,
        gps_sigma: f64 = 2.0,
        lidar_z_sigma: f64 = 0.05,
    }
    Label {
        percentile: f64 = 20.0,
        n0_dbm: f64 = -90.0,
        /// Stored power vectors are in dB (otherwise linear mW).
        power_in_db: bool = true,
    }
    Split {
        split_train: f64 = 0.70,
        split_val: f64 = 0.15,
        split_test: f64 = 0.15,
    }
    Model {
        d_model: usize = 64,
        layers: usize = 2,
        heads: usize = 4,
        ffn_mult: usize = 4,
    }
    Train {
        epochs: usize = 40,
        batch: usize = 32,
        lr: f64 = 1e-3,
        weight_decay: f64 = 0.01,
        beta1: f64 = 0.9,
        beta2: f64 = 0.999,
        adam_eps: f64 = 1e-8,
        clip_norm: f64 = 1.0,
        lambda_beam: f64 = 1.0,
        lambda_blk: f64 = 0.5,
        lambda_pose: f64 = 0.25,
        plateau_factor: f64 = 0.5,
        plateau_patience: usize = 5,
        plateau_threshold: f64 = 1e-4,
        min_lr: f64 = 1e-5,
    }
    Map {
        map_cell: f64 = 0.5,
        voxel: f64 = 0.25,
        /// Output pixels per grid cell.
        map_scale: usize = 4,
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hex_hash(h: u64) -> String {
    format!("{h:016x}")
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn hash_where(&self, keep: impl Fn(Group) -> bool) -> u64 {
        let mut items: Vec<(&str, String)> = self
            .entries()
            .into_iter()
            .filter(|(_, g, _)| keep(*g))
            .map(|(k, _, v)| (k, v))
            .collect();
        items.sort();
        let mut s = String::new();
        for (k, v) in items {
            let _ = writeln!(s, "{k}={v}");
        }
        fnv1a64(s.as_bytes())
    }

    /// FNV-1a over the sorted `key=value` lines of every key.
    pub fn config_hash(&self) -> u64 {
        self.hash_where(|_| true)
    }

    /// Hash of the keys that determine dataset bytes, labels and split.
    pub fn dataset_hash(&self) -> u64 {
        self.hash_where(Group::shapes_dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.sequences == 0 || self.snapshots < 2 {
            return bad("need at least one sequence of two snapshots".into());
        }
        if !(self.dt > 0.0 && self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad("need dt > 0 and 0 < speed_min <= speed_max".into());
        }
        if self.n_ant == 0 || self.d0_m <= 0.0 {
            return bad("n_ant and d0_m must be positive".into());
        }
        if self.shadow_db < 0.0 || self.gps_sigma < 0.0 || self.lidar_z_sigma < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return bad(format!("percentile {} outside (0, 100)", self.percentile));
        }
        let fr = [self.split_train, self.split_val, self.split_test];
        if fr.iter().any(|&f| f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be positive".into());
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("need lr >= 0, weight_decay >= 0, clip_norm > 0".into());
        }
        if [self.lambda_beam, self.lambda_blk, self.lambda_pose].iter().any(|&l| l < 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.min_lr < 0.0 {
            return bad("plateau factor must lie in (0, 1) and min_lr >= 0".into());
        }
        if self.map_cell <= 0.0 || self.voxel < 0.0 || self.map_scale == 0 {
            return bad("map_cell and map_scale must be positive, voxel non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn parse_comments_and_overrides() {
        let cfg = RunConfig::parse("# header\nseed = 3  # inline\n\nlr=0.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.epochs, 40);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(CoreError::Config(_))));
        assert!(matches!(RunConfig::parse("seed = x"), Err(CoreError::Config(_))));
        assert!(matches!(RunConfig::parse("seed"), Err(CoreError::Config(_))));
        assert!(matches!(RunConfig::parse("lr = nan"), Err(CoreError::Config(_))));
    }

    #[test]
    fn text_round_trip_preserves_hash() {
        let mut cfg = RunConfig::default();
        cfg.set("min_lr", "0.00001").unwrap();
        cfg.set("power_in_db", "false").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn dataset_hash_ignores_training_keys() {
        let base = RunConfig::default();
        let mut t = base.clone();
        t.lr = 0.1;
        assert_eq!(t.dataset_hash(), base.dataset_hash());
        assert_ne!(t.config_hash(), base.config_hash());
        let mut s = base.clone();
        s.seed = 8;
        assert_ne!(s.dataset_hash(), base.dataset_hash());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
    }
}
