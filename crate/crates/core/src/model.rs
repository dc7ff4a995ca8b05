//! Modality encoders, CLS-token Transformer fusion and the three heads.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use beamfuse_numerics::layers::{conv2d, linear, multi_head_attention, AttentionWeights};
use beamfuse_numerics::{Bound, ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{fnv1a64, hex_hash, RunConfig};
use crate::dataset::{read_json, write_atomic, write_json};
use crate::error::{CoreError, Result};
use crate::metrics::{argmax, blocked_decision, Predictions};
use crate::rng::Rng;
use crate::simulator::codebook::NUM_BEAMS;
use crate::simulator::sensors::{GRID, LIDAR_POINTS};
use crate::simulator::Snapshot;

/// LiDAR coordinates are divided by this before entering the encoder.
pub const LIDAR_SCALE: f32 = 20.0;
pub const MMW_INPUTS: usize = NUM_BEAMS + 1;
/// Sequence length seen by the fusion Transformer: CLS + five modalities.
pub const TOKENS: usize = 6;
/// Row of the type-embedding table used by the CLS slot.
const CLS_TYPE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Camera,
    Lidar,
    Radar,
    Gps,
    Mmwave,
}

impl Modality {
    pub const ALL: [Modality; 5] = [Modality::Camera, Modality::Lidar, Modality::Radar, Modality::Gps, Modality::Mmwave];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::Lidar => "lidar",
            Modality::Radar => "radar",
            Modality::Gps => "gps",
            Modality::Mmwave => "mmwave",
        }
    }
}

/// Full fusion network or a single-encoder baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fusion,
    Unimodal(Modality),
}

impl Variant {
    pub fn uses(self, m: Modality) -> bool {
        match self {
            Variant::Fusion => true,
            Variant::Unimodal(u) => u == m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fusion => "all",
            Variant::Unimodal(m) => m.name(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Variant::Fusion);
        }
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .map(Variant::Unimodal)
            .ok_or_else(|| CoreError::Config(format!("unknown modality `{s}` (camera, lidar, radar, gps, mmwave, all)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

/// Train-split normalization statistics, stored with the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub gnss_mean: [f64; 2],
    pub gnss_std: [f64; 2],
    /// Scalar statistics over all non-missing previous-sweep entries, dB.
    pub mmw_mean: f64,
    pub mmw_std: f64,
    pub pose_mean: [f64; 2],
    /// Shared by both axes.
    pub pose_std: [f64; 2],
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

pub fn is_missing(prev: &[f32]) -> bool {
    prev.iter().all(|&v| v == 0.0)
}

impl NormStats {
    pub fn from_train(snaps: &[&Snapshot]) -> Result<Self> {
        if snaps.is_empty() {
            return Err(CoreError::Data("normalization statistics need training snapshots".into()));
        }
        let axis = |f: fn(&Snapshot) -> [f32; 2], k: usize| mean_std(snaps.iter().map(move |s| f(s)[k] as f64));
        let (gx, gy) = (axis(|s| s.gnss, 0), axis(|s| s.gnss, 1));
        let (px, py) = (axis(|s| s.truth, 0), axis(|s| s.truth, 1));
        // one scale for both axes, so the loss weighs meters equally
        let pose_scale = ((px.1 * px.1 + py.1 * py.1) / 2.0).sqrt();
        let mmw = mean_std(
            snaps
                .iter()
                .filter(|s| !is_missing(&s.prev_power))
                .flat_map(|s| s.prev_power.iter().map(|&v| v as f64)),
        );
        Ok(Self {
            gnss_mean: [gx.0, gy.0],
            gnss_std: [gx.1, gy.1],
            mmw_mean: mmw.0,
            mmw_std: mmw.1,
            pose_mean: [px.0, py.0],
            pose_std: [pose_scale; 2],
        })
    }

    pub fn standardize_pose(&self, p: [f32; 2]) -> [f32; 2] {
        [
            ((p[0] as f64 - self.pose_mean[0]) / self.pose_std[0]) as f32,
            ((p[1] as f64 - self.pose_mean[1]) / self.pose_std[1]) as f32,
        ]
    }

    pub fn destandardize_pose(&self, z: [f32; 2]) -> [f32; 2] {
        [
            (z[0] as f64 * self.pose_std[0] + self.pose_mean[0]) as f32,
            (z[1] as f64 * self.pose_std[1] + self.pose_mean[1]) as f32,
        ]
    }
}

/// Network inputs for `n` snapshots. Tensors of unused modalities are empty.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n: usize,
    /// `[n·32·32, 3]`, rows ordered (sample, azimuth, range).
    pub image: Tensor,
    /// `[n·256, 3]`, scaled by 1/[`LIDAR_SCALE`].
    pub lidar: Tensor,
    /// `[n·32·32, 1]`, rows ordered (sample, range, azimuth).
    pub radar: Tensor,
    /// `[n, 2]` standardized.
    pub gnss: Tensor,
    /// `[n, 65]`: z-scored previous sweep plus a missing flag.
    pub mmwave: Tensor,
}

impl Batch {
    pub fn build(snaps: &[&Snapshot], stats: &NormStats, variant: Variant) -> Result<Self> {
        let n = snaps.len();
        if n == 0 {
            return Err(CoreError::Data("empty batch".into()));
        }
        let px = GRID * GRID;
        let mut image = Vec::new();
        if variant.uses(Modality::Camera) {
            image.reserve(n * px * 3);
            for s in snaps {
                for cell in 0..px {
                    image.extend((0..3).map(|c| s.image[c * px + cell]));
                }
            }
        }
        let mut lidar = Vec::new();
        if variant.uses(Modality::Lidar) {
            for s in snaps {
                lidar.extend(s.lidar.iter().map(|v| v / LIDAR_SCALE));
            }
        }
        let mut radar = Vec::new();
        if variant.uses(Modality::Radar) {
            for s in snaps {
                radar.extend_from_slice(&s.radar);
            }
        }
        let mut gnss = Vec::new();
        if variant.uses(Modality::Gps) {
            for s in snaps {
                for k in 0..2 {
                    gnss.push(((s.gnss[k] as f64 - stats.gnss_mean[k]) / stats.gnss_std[k]) as f32);
                }
            }
        }
        let mut mmwave = Vec::new();
        if variant.uses(Modality::Mmwave) {
            for s in snaps {
                if is_missing(&s.prev_power) {
                    mmwave.extend([0.0; NUM_BEAMS]);
                    mmwave.push(1.0);
                } else {
                    mmwave.extend(s.prev_power.iter().map(|&v| ((v as f64 - stats.mmw_mean) / stats.mmw_std) as f32));
                    mmwave.push(0.0);
                }
            }
        }
        let shape = |v: &Vec<f32>, rows: usize, cols: usize| if v.is_empty() { vec![0, cols] } else { vec![rows, cols] };
        Ok(Self {
            n,
            image: Tensor::new(shape(&image, n * px, 3), image)?,
            lidar: Tensor::new(shape(&lidar, n * LIDAR_POINTS, 3), lidar)?,
            radar: Tensor::new(shape(&radar, n * px, 1), radar)?,
            gnss: Tensor::new(shape(&gnss, n, 2), gnss)?,
            mmwave: Tensor::new(shape(&mmwave, n, MMW_INPUTS), mmwave)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ImageEnc {
    convs: [Dense; 3],
    proj: Dense,
}

#[derive(Clone, Debug)]
struct PointEnc {
    l1: Dense,
    l2: Dense,
}

#[derive(Clone, Debug)]
struct RadarEnc {
    convs: [Dense; 2],
    proj: Dense,
}

#[derive(Clone, Debug)]
struct GnssEnc {
    l1: Dense,
    norm: Dense,
    l2: Dense,
}

#[derive(Clone, Debug)]
struct MmwEnc {
    l1: Dense,
    l2: Dense,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Dense,
    attn: [Dense; 4],
    ln2: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
struct Fusion {
    cls: ParamId,
    types: ParamId,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
enum Core {
    Fusion(Fusion),
    Trunk(Dense, Dense),
}

#[derive(Clone, Debug)]
struct Layout {
    image: Option<ImageEnc>,
    point: Option<PointEnc>,
    radar: Option<RadarEnc>,
    gnss: Option<GnssEnc>,
    mmw: Option<MmwEnc>,
    core: Core,
    beam: Dense,
    blk: Dense,
    pose: Dense,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    /// Weights and bias both `U(±1/√fan_in)`.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| self.rng.uniform_in(-bound, bound) as f32).collect();
        let b = (0..fan_out).map(|_| self.rng.uniform_in(-bound, bound) as f32).collect();
        self.with_weights(name, fan_in, fan_out, w, b)
    }

    fn zeros(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        self.with_weights(name, fan_in, fan_out, vec![0.0; fan_in * fan_out], vec![0.0; fan_out])
    }

    fn with_weights(&mut self, name: &str, fan_in: usize, fan_out: usize, w: Vec<f32>, b: Vec<f32>) -> Dense {
        let w = self.store.add(format!("{name}.w"), Tensor::new([fan_in, fan_out], w).expect("sized"));
        let b = self.store.add(format!("{name}.b"), Tensor::new([fan_out], b).expect("sized"));
        Dense { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Dense {
        let w = self.store.add(format!("{name}.gamma"), Tensor::full([d], 1.0));
        let b = self.store.add(format!("{name}.beta"), Tensor::zeros([d]));
        Dense { w, b }
    }

    fn embedding(&mut self, name: &str, rows: usize, d: usize) -> ParamId {
        let data = (0..rows * d).map(|_| self.rng.gaussian(0.0, 0.02) as f32).collect();
        self.store.add(name, Tensor::new([rows, d], data).expect("sized"))
    }
}

fn conv_geom(n: usize, size: usize, channels: usize) -> ConvGeom {
    ConvGeom {
        batch: n,
        height: size,
        width: size,
        channels,
        kernel: 3,
        stride: 2,
        padding: 1,
    }
}

/// Raw head outputs on a graph: `beam [n,64]`, `blk [n,1]`, standardized `pose [n,2]`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub beam: Var,
    pub blk: Var,
    pub pose: Var,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: ModelConfig,
    pub variant: Variant,
    pub stats: NormStats,
    pub params: ParamStore,
    layout: Layout,
}

const IMG_WIDTHS: [usize; 3] = [16, 32, 64];
const RADAR_WIDTHS: [usize; 2] = [16, 32];
const HIDDEN_POINT: usize = 64;
const HIDDEN_GNSS: usize = 64;
const HIDDEN_MMW: usize = 128;

impl FusionNet {
    /// Encoder/trunk weights are random; the three heads start at zero, so
    /// the initial beam distribution is uniform.
    pub fn new(config: ModelConfig, variant: Variant, stats: NormStats, seed: u64) -> Result<Self> {
        let d = config.d;
        if d == 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(CoreError::Config(format!("width {d} not divisible by {} heads", config.heads)));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: Rng::new(seed),
        };
        let uses = |m| variant.uses(m);
        let image = uses(Modality::Camera).then(|| {
            let c1 = init.dense("img.conv1", 9 * 3, IMG_WIDTHS[0]);
            let c2 = init.dense("img.conv2", 9 * IMG_WIDTHS[0], IMG_WIDTHS[1]);
            let c3 = init.dense("img.conv3", 9 * IMG_WIDTHS[1], IMG_WIDTHS[2]);
            ImageEnc {
                convs: [c1, c2, c3],
                proj: init.dense("img.proj", IMG_WIDTHS[2], d),
            }
        });
        let point = uses(Modality::Lidar).then(|| PointEnc {
            l1: init.dense("lidar.fc1", 3, HIDDEN_POINT),
            l2: init.dense("lidar.fc2", HIDDEN_POINT, d),
        });
        let radar = uses(Modality::Radar).then(|| {
            let c1 = init.dense("radar.conv1", 9, RADAR_WIDTHS[0]);
            let c2 = init.dense("radar.conv2", 9 * RADAR_WIDTHS[0], RADAR_WIDTHS[1]);
            RadarEnc {
                convs: [c1, c2],
                proj: init.dense("radar.proj", RADAR_WIDTHS[1], d),
            }
        });
        let gnss = uses(Modality::Gps).then(|| GnssEnc {
            l1: init.dense("gps.fc1", 2, HIDDEN_GNSS),
            norm: init.norm("gps.norm", HIDDEN_GNSS),
            l2: init.dense("gps.fc2", HIDDEN_GNSS, d),
        });
        let mmw = uses(Modality::Mmwave).then(|| MmwEnc {
            l1: init.dense("mmw.fc1", MMW_INPUTS, HIDDEN_MMW),
            l2: init.dense("mmw.fc2", HIDDEN_MMW, d),
        });
        let core = match variant {
            Variant::Fusion => {
                let cls = init.embedding("fusion.cls", 1, d);
                let types = init.embedding("fusion.types", TOKENS, d);
                let blocks = (0..config.layers)
                    .map(|l| {
                        let p = format!("fusion.layer{l}");
                        Block {
                            ln1: init.norm(&format!("{p}.ln1"), d),
                            attn: [
                                init.dense(&format!("{p}.q"), d, d),
                                init.dense(&format!("{p}.k"), d, d),
                                init.dense(&format!("{p}.v"), d, d),
                                init.dense(&format!("{p}.o"), d, d),
                            ],
                            ln2: init.norm(&format!("{p}.ln2"), d),
                            ff1: init.dense(&format!("{p}.ff1"), d, config.ffn_mult * d),
                            ff2: init.dense(&format!("{p}.ff2"), config.ffn_mult * d, d),
                        }
                    })
                    .collect();
                Core::Fusion(Fusion { cls, types, blocks })
            }
            Variant::Unimodal(_) => Core::Trunk(init.dense("trunk.fc1", d, d), init.dense("trunk.fc2", d, d)),
        };
        let beam = init.zeros("head.beam", d, NUM_BEAMS);
        let blk = init.zeros("head.blk", d, 1);
        let pose = init.zeros("head.pose", d, 2);
        let layout = Layout {
            image,
            point,
            radar,
            gnss,
            mmw,
            core,
            beam,
            blk,
            pose,
        };
        Ok(Self {
            config,
            variant,
            stats,
            params: store,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Rebuilds a network around loaded parameters, checking names and shapes.
    pub fn with_params(config: ModelConfig, variant: Variant, stats: NormStats, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, variant, stats, 0)?;
        net.params.copy_from(&params)?;
        Ok(net)
    }

    fn input<T: Real>(g: &mut Graph<T>, t: &Tensor) -> Var {
        g.constant(t.cast())
    }

    fn dense<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var, l: Dense) -> Result<Var> {
        Ok(linear(g, x, p[l.w], p[l.b])?)
    }

    /// Per-modality tokens, each `[n, d]`, in slot order.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &Batch) -> Result<Vec<Var>> {
        let n = batch.n;
        let mut tokens = Vec::with_capacity(5);
        let lay = &self.layout;
        if let Some(e) = &lay.image {
            let mut x = Self::input(g, &batch.image);
            let mut size = GRID;
            let mut ch = 3;
            for (conv, width) in e.convs.iter().zip(IMG_WIDTHS) {
                x = conv2d(g, x, conv_geom(n, size, ch), p[conv.w], p[conv.b])?;
                x = g.relu(x)?;
                size /= 2;
                ch = width;
            }
            let pooled = g.mean_groups(x, size * size)?;
            tokens.push(Self::dense(g, p, pooled, e.proj)?);
        }
        if let Some(e) = &lay.point {
            let x = Self::input(g, &batch.lidar);
            let h = Self::dense(g, p, x, e.l1)?;
            let h = g.relu(h)?;
            let f = Self::dense(g, p, h, e.l2)?;
            tokens.push(g.max_groups(f, LIDAR_POINTS)?);
        }
        if let Some(e) = &lay.radar {
            let mut x = Self::input(g, &batch.radar);
            let mut size = GRID;
            let mut ch = 1;
            for (conv, width) in e.convs.iter().zip(RADAR_WIDTHS) {
                x = conv2d(g, x, conv_geom(n, size, ch), p[conv.w], p[conv.b])?;
                x = g.relu(x)?;
                size /= 2;
                ch = width;
            }
            let pooled = g.mean_groups(x, size * size)?;
            tokens.push(Self::dense(g, p, pooled, e.proj)?);
        }
        if let Some(e) = &lay.gnss {
            let x = Self::input(g, &batch.gnss);
            let h = Self::dense(g, p, x, e.l1)?;
            let h = Self::feature_affine(g, p, h, e.norm, batch.n)?;
            let h = g.relu(h)?;
            tokens.push(Self::dense(g, p, h, e.l2)?);
        }
        if let Some(e) = &lay.mmw {
            let x = Self::input(g, &batch.mmwave);
            let h = Self::dense(g, p, x, e.l1)?;
            let h = g.relu(h)?;
            tokens.push(Self::dense(g, p, h, e.l2)?);
        }
        Ok(tokens)
    }

    /// CLS output of the Transformer over `[CLS, camera, lidar, radar, gnss, mmwave]`.
    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: &[Var], n: usize) -> Result<Var> {
        let Core::Fusion(f) = &self.layout.core else {
            return Err(CoreError::Config("fuse called on a unimodal network".into()));
        };
        if tokens.len() != TOKENS - 1 {
            return Err(CoreError::Data(format!("fusion needs {} modality tokens, got {}", TOKENS - 1, tokens.len())));
        }
        let cls = g.gather_rows(p[f.cls], &vec![0; n])?;
        let mut parts = vec![cls];
        parts.extend_from_slice(tokens);
        let stacked = g.concat_rows(&parts)?;
        // part-major rows → (sample, slot) order
        let order: Vec<usize> = (0..n).flat_map(|b| (0..TOKENS).map(move |s| s * n + b)).collect();
        let seq = g.gather_rows(stacked, &order)?;
        let type_rows: Vec<usize> = (0..n)
            .flat_map(|_| (0..TOKENS).map(|s| if s == 0 { CLS_TYPE } else { s - 1 }))
            .collect();
        let types = g.gather_rows(p[f.types], &type_rows)?;
        let mut x = g.add(seq, types)?;
        for blk in &f.blocks {
            let h = g.layer_norm(x, p[blk.ln1.w], p[blk.ln1.b])?;
            let [q, k, v, o] = blk.attn;
            let w = AttentionWeights {
                wq: p[q.w],
                bq: p[q.b],
                wk: p[k.w],
                bk: p[k.b],
                wv: p[v.w],
                bv: p[v.b],
                wo: p[o.w],
                bo: p[o.b],
            };
            let a = multi_head_attention(g, h, n, TOKENS, self.config.heads, &w)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p[blk.ln2.w], p[blk.ln2.b])?;
            let h = Self::dense(g, p, h, blk.ff1)?;
            let h = g.relu(h)?;
            let h = Self::dense(g, p, h, blk.ff2)?;
            x = g.add(x, h)?;
        }
        let cls_rows: Vec<usize> = (0..n).map(|b| b * TOKENS).collect();
        Ok(g.gather_rows(x, &cls_rows)?)
    }

    /// Per-feature scale and shift, `γ ⊙ h + β`: the fixed-statistics form of
    /// batch normalization, so train and eval agree at any batch size.
    fn feature_affine<T: Real>(g: &mut Graph<T>, p: &Bound, h: Var, l: Dense, n: usize) -> Result<Var> {
        let d = g.value(p[l.w]).len();
        let gamma = g.reshape(p[l.w], &[1, d])?;
        let gamma = g.gather_rows(gamma, &vec![0; n])?;
        let h = g.mul(h, gamma)?;
        Ok(g.add_bias(h, p[l.b])?)
    }

    /// Affine heads on a `[n, d]` summary.
    pub fn heads<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Outputs> {
        Ok(Outputs {
            beam: Self::dense(g, p, h, self.layout.beam)?,
            blk: Self::dense(g, p, h, self.layout.blk)?,
            pose: Self::dense(g, p, h, self.layout.pose)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &Batch) -> Result<Outputs> {
        let tokens = self.encode(g, p, batch)?;
        let h = match &self.layout.core {
            Core::Fusion(_) => self.fuse(g, p, &tokens, batch.n)?,
            Core::Trunk(l1, l2) => {
                let h = Self::dense(g, p, tokens[0], *l1)?;
                let h = g.relu(h)?;
                Self::dense(g, p, h, *l2)?
            }
        };
        self.heads(g, p, h)
    }

    /// Reads graph outputs into host predictions with poses in meters.
    pub fn collect<T: Real>(&self, g: &Graph<T>, out: &Outputs, pred: &mut Predictions) {
        pred.beam_logits.extend(g.value(out.beam).data().iter().map(|v| v.as_f64() as f32));
        pred.blk_prob.extend(g.value(out.blk).data().iter().map(|v| beamfuse_numerics::kernels::sigmoid(v.as_f64()) as f32));
        for z in g.value(out.pose).data().chunks(2) {
            pred.pose.push(self.stats.destandardize_pose([z[0].as_f64() as f32, z[1].as_f64() as f32]));
        }
    }

    /// Batched inference over snapshots.
    pub fn predict(&self, snaps: &[&Snapshot], batch_size: usize) -> Result<Predictions> {
        let mut pred = Predictions::default();
        for chunk in snaps.chunks(batch_size.max(1)) {
            let batch = Batch::build(chunk, &self.stats, self.variant)?;
            let mut g = Graph::<f32>::new();
            let p = self.params.bind(&mut g);
            let out = self.forward(&mut g, &p, &batch)?;
            self.collect(&g, &out, &mut pred);
        }
        Ok(pred)
    }
}

/// Hard decisions for one snapshot: beam `argmax π` (ties → lowest), blocked `q ≥ 0.5`.
pub fn decide(beam_logits: &[f32], q: f32) -> (usize, u8) {
    (argmax(beam_logits), blocked_decision(q))
}

pub const WEIGHTS_FILE: &str = "model.bfck";
pub const SIDECAR_FILE: &str = "model.json";
const SIDECAR_FORMAT: &str = "beamfuse-checkpoint-1";

/// JSON companion of the binary weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub modality: String,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub stats: NormStats,
    pub tau_db: f64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub param_count: usize,
    /// Hash of the weight file bytes.
    pub checkpoint_id: String,
    pub config: BTreeMap<String, String>,
}

impl Sidecar {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            d: cfg.d_model,
            layers: cfg.layers,
            heads: cfg.heads,
            ffn_mult: cfg.ffn_mult,
        }
    }
}

/// Writes weights and sidecar into `dir`; returns the sidecar.
pub fn save_checkpoint(
    dir: &Path,
    net: &FusionNet,
    cfg: &RunConfig,
    tau_db: f64,
    best_epoch: usize,
) -> Result<Sidecar> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut bytes = Vec::new();
    net.params.write_to(&mut bytes)?;
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    let side = Sidecar {
        format: SIDECAR_FORMAT.into(),
        modality: net.variant.name().into(),
        d: net.config.d,
        layers: net.config.layers,
        heads: net.config.heads,
        ffn_mult: net.config.ffn_mult,
        stats: net.stats,
        tau_db,
        config_hash: hex_hash(cfg.config_hash()),
        dataset_hash: hex_hash(cfg.dataset_hash()),
        best_epoch,
        param_count: net.param_count(),
        checkpoint_id: hex_hash(fnv1a64(&bytes)),
        config: cfg.entries().into_iter().map(|(k, _, v)| (k.to_string(), v)).collect(),
    };
    write_json(&dir.join(SIDECAR_FILE), &side)?;
    Ok(side)
}

/// Loads a checkpoint directory, verifying the weight hash and layout.
pub fn load_checkpoint(dir: &Path) -> Result<(FusionNet, Sidecar)> {
    let side: Sidecar = read_json(&dir.join(SIDECAR_FILE))?;
    if side.format != SIDECAR_FORMAT {
        return Err(CoreError::format("checkpoint sidecar", format!("unknown format `{}`", side.format)));
    }
    let path = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    if hex_hash(fnv1a64(&bytes)) != side.checkpoint_id {
        return Err(CoreError::Consistency(format!("{} does not match its sidecar", path.display())));
    }
    let params = ParamStore::read_from(bytes.as_slice())?;
    let variant: Variant = side.modality.parse()?;
    let net = FusionNet::with_params(side.model_config(), variant, side.stats, params)?;
    Ok((net, side))
}
