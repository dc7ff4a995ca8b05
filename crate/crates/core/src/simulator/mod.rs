//! Synthetic V2I drives: scene, trajectory, channel sweep and sensor
//! observations for every snapshot.

pub mod channel;
pub mod codebook;
pub mod geometry;
pub mod scene;
pub mod sensors;
pub mod trajectory;

use channel::{simulate_power, ChannelParams};
use codebook::{BeamCodebook, NUM_BEAMS};
use scene::{build_scene, DynamicBlocker, Frame, Scene};
use sensors::{camera_static, gnss_noisify, raycast_lidar, render_camera, synth_radar};
use trajectory::sample_trajectory;

use crate::config::RunConfig;
use crate::error::Result;
use crate::rng::Rng;

/// Salt separating the scene stream from per-sequence streams.
const SCENE_SALT: u64 = 0x5CE4_E5EE_D000_0000;

/// One synchronized observation tuple with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub seq_id: u32,
    /// 1-based index within the sequence.
    pub t: u32,
    pub image: Vec<f32>,
    pub lidar: Vec<f32>,
    pub radar: Vec<f32>,
    pub gnss: [f32; 2],
    pub power: [f32; NUM_BEAMS],
    /// Previous sweep; all zeros for the first snapshot.
    pub prev_power: [f32; NUM_BEAMS],
    pub truth: [f32; 2],
    /// Geometric line-of-sight blockage (diagnostics only).
    pub blocked_geom: bool,
}

#[derive(Clone, Debug)]
pub struct Simulator {
    pub scene: Scene,
    pub codebook: BeamCodebook,
    pub channel: ChannelParams,
    cfg: RunConfig,
}

impl Simulator {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            scene: build_scene(cfg.static_blockers, cfg.seed ^ SCENE_SALT)?,
            codebook: BeamCodebook::new(cfg.n_ant),
            channel: ChannelParams {
                p0_db: cfg.p0_db,
                d0_m: cfg.d0_m,
                blockage_db: cfg.blockage_db,
                reflection_db: cfg.reflection_db,
                shadow_db: cfg.shadow_db,
            },
            cfg: cfg.clone(),
        })
    }

    pub fn sequence_seed(&self, id: u32) -> u64 {
        self.cfg.seed ^ id as u64
    }

    /// Generates sequence `id`. Draw order: trajectory, dynamic blockers,
    /// then per snapshot shadowing, LiDAR heights/fills, GNSS noise.
    pub fn sequence(&self, id: u32) -> Result<Vec<Snapshot>> {
        let cfg = &self.cfg;
        let mut rng = Rng::new(self.sequence_seed(id));
        let traj = sample_trajectory(&mut rng, cfg.snapshots, cfg.dt, cfg.speed_min, cfg.speed_max);
        let dynamic: Vec<DynamicBlocker> = (0..cfg.dynamic_blockers).map(|_| DynamicBlocker::sample(&mut rng)).collect();
        let static_layer = camera_static(&Frame::static_only(&self.scene));

        let mut out: Vec<Snapshot> = Vec::with_capacity(traj.poses.len());
        for (i, &p) in traj.poses.iter().enumerate() {
            let frame = Frame::new(&self.scene, &dynamic, i as f64 * cfg.dt);
            let blocked = frame.los_blocked(p);
            let power = simulate_power(&frame, &self.channel, &self.codebook, p, &mut rng);
            let lidar = raycast_lidar(&frame, p, cfg.lidar_z_sigma, &mut rng)?;
            let g = gnss_noisify(p, cfg.gps_sigma, &mut rng);
            out.push(Snapshot {
                seq_id: id,
                t: i as u32 + 1,
                image: render_camera(&frame, &static_layer, p, blocked),
                lidar,
                radar: synth_radar(&frame, Some(p)),
                gnss: [g.0 as f32, g.1 as f32],
                power,
                prev_power: out.last().map_or([0.0; NUM_BEAMS], |s| s.power),
                truth: [p.0 as f32, p.1 as f32],
                blocked_geom: blocked,
            });
        }
        Ok(out)
    }
}
