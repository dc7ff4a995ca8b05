//! Camera, LiDAR, radar and GNSS stand-ins rendered from scene geometry.

use std::f64::consts::PI;

use super::geometry::{ray_disc, ray_hline, Rect};
use super::scene::{near_wall_at, Frame, FAR_WALL_Y, NEAR_WALL_Y, X_MAX, X_MIN};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

pub const GRID: usize = 32;
pub const IMAGE_LEN: usize = 3 * GRID * GRID;
pub const LIDAR_POINTS: usize = 256;
pub const RADAR_LEN: usize = GRID * GRID;
pub const FOV_DEG: f64 = 60.0;
pub const MAX_RANGE: f64 = 80.0;
pub const VEHICLE_RADIUS: f64 = 1.0;

/// Sampling pitch used to rasterize walls and blocker footprints.
const RASTER_STEP: f64 = 0.05;

/// Azimuth from the +y boresight in degrees, positive toward +x.
pub fn azimuth_deg(p: (f64, f64)) -> f64 {
    libm::atan2(p.0, p.1).to_degrees()
}

/// `(azimuth bin, range bin)` under floor binning, if inside the field.
pub fn polar_bins(p: (f64, f64)) -> Option<(usize, usize)> {
    let az = azimuth_deg(p);
    let r = libm::hypot(p.0, p.1);
    let a = ((az + FOV_DEG) / (2.0 * FOV_DEG) * GRID as f64).floor();
    let rb = (r / MAX_RANGE * GRID as f64).floor();
    if (0.0..GRID as f64).contains(&a) && (0.0..GRID as f64).contains(&rb) {
        Some((a as usize, rb as usize))
    } else {
        None
    }
}

fn mark(img: &mut [f32], channel: usize, p: (f64, f64)) {
    if let Some((a, r)) = polar_bins(p) {
        img[(channel * GRID + a) * GRID + r] = 1.0;
    }
}

fn mark_rect(img: &mut [f32], channel: usize, r: &Rect) {
    let nx = (2.0 * r.hx / RASTER_STEP).ceil() as usize;
    let ny = (2.0 * r.hy / RASTER_STEP).ceil() as usize;
    for i in 0..=nx {
        for j in 0..=ny {
            let x = r.x_min() + (2.0 * r.hx) * i as f64 / nx as f64;
            let y = r.y_min() + (2.0 * r.hy) * j as f64 / ny as f64;
            mark(img, channel, (x, y));
        }
    }
}

/// Channel 0 of the camera: walls and static blockers. Constant per scene.
pub fn camera_static(frame: &Frame) -> Vec<f32> {
    let mut img = vec![0.0; IMAGE_LEN];
    let n = ((X_MAX - X_MIN) / RASTER_STEP).round() as usize;
    for i in 0..=n {
        let x = X_MIN + (X_MAX - X_MIN) * i as f64 / n as f64;
        if near_wall_at(x) {
            mark(&mut img, 0, (x, NEAR_WALL_Y));
        }
        mark(&mut img, 0, (x, FAR_WALL_Y));
    }
    for b in &frame.scene.static_blockers {
        mark_rect(&mut img, 0, b);
    }
    img
}

/// Azimuth × range occupancy, layout `[channel][az][range]`. Channel 1 holds
/// dynamic blockers, channel 2 the target cell unless line of sight is blocked.
pub fn render_camera(frame: &Frame, static_layer: &[f32], p: (f64, f64), blocked: bool) -> Vec<f32> {
    let mut img = static_layer.to_vec();
    for b in &frame.dynamic {
        mark_rect(&mut img, 1, b);
    }
    if !blocked {
        mark(&mut img, 2, p);
    }
    img
}

/// Nearest surface hit of a ray from the BS, within [`MAX_RANGE`].
pub fn first_hit(frame: &Frame, vehicle: (f64, f64), d: (f64, f64)) -> Option<(f64, f64)> {
    let o = (0.0, 0.0);
    let mut best = f64::INFINITY;
    if let Some(t) = ray_hline(o, d, NEAR_WALL_Y) {
        if near_wall_at(t * d.0) {
            best = best.min(t);
        }
    }
    if let Some(t) = ray_hline(o, d, FAR_WALL_Y) {
        if (X_MIN..=X_MAX).contains(&(t * d.0)) {
            best = best.min(t);
        }
    }
    for b in frame.blockers() {
        if let Some(t) = b.ray_entry(o, d) {
            best = best.min(t);
        }
    }
    if let Some(t) = ray_disc(o, d, vehicle, VEHICLE_RADIUS) {
        best = best.min(t);
    }
    (best <= MAX_RANGE).then(|| (best * d.0, best * d.1))
}

/// 256 planar rays at `2πi/256`. Misses are replaced by copies of random
/// hits with a fresh height sample. Output is `[point][x, y, z]`.
pub fn raycast_lidar(frame: &Frame, vehicle: (f64, f64), z_sigma: f64, rng: &mut Rng) -> Result<Vec<f32>> {
    let mut pts: Vec<Option<(f64, f64, f64)>> = Vec::with_capacity(LIDAR_POINTS);
    for i in 0..LIDAR_POINTS {
        let th = 2.0 * PI * i as f64 / LIDAR_POINTS as f64;
        let d = (libm::cos(th), libm::sin(th));
        pts.push(first_hit(frame, vehicle, d).map(|(x, y)| (x, y, rng.gaussian(0.0, z_sigma))));
    }
    let hits: Vec<(f64, f64)> = pts.iter().flatten().map(|&(x, y, _)| (x, y)).collect();
    if hits.is_empty() {
        return Err(CoreError::Generation("no LiDAR returns: scene has no geometry".into()));
    }
    let mut out = Vec::with_capacity(3 * LIDAR_POINTS);
    for p in pts {
        let (x, y, z) = match p {
            Some(p) => p,
            None => {
                let (x, y) = hits[rng.below(hits.len())];
                (x, y, rng.gaussian(0.0, z_sigma))
            }
        };
        out.extend([x as f32, y as f32, z as f32]);
    }
    Ok(out)
}

/// Range–azimuth magnitudes before normalization, layout `[range][az]`.
/// Each object adds a unit-σ Gaussian blob centred on its bin with peak
/// `reflectivity / d²`.
pub fn radar_raw(objects: &[((f64, f64), f64)]) -> Vec<f64> {
    let mut map = vec![0.0; RADAR_LEN];
    for &(p, refl) in objects {
        let Some((a0, r0)) = polar_bins(p) else { continue };
        let d2 = p.0 * p.0 + p.1 * p.1;
        let amp = refl / d2;
        for r in 0..GRID {
            for a in 0..GRID {
                let (dr, da) = (r as f64 - r0 as f64, a as f64 - a0 as f64);
                map[r * GRID + a] += amp * libm::exp(-0.5 * (dr * dr + da * da));
            }
        }
    }
    map
}

/// Radar map of the vehicle (reflectivity 1) and all blockers, scaled to
/// a maximum of 1 when anything is in view. Walls are not radar objects.
pub fn synth_radar(frame: &Frame, vehicle: Option<(f64, f64)>) -> Vec<f32> {
    let mut objects: Vec<((f64, f64), f64)> = frame.blockers().map(|b| ((b.cx, b.cy), b.refl)).collect();
    if let Some(v) = vehicle {
        objects.push((v, 1.0));
    }
    let raw = radar_raw(&objects);
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0; RADAR_LEN]
    }
}

/// `s + n`, `n ~ N(0, σ²)` per axis, x drawn first.
pub fn gnss_noisify(p: (f64, f64), sigma: f64, rng: &mut Rng) -> (f64, f64) {
    let nx = rng.gaussian(0.0, sigma);
    let ny = rng.gaussian(0.0, sigma);
    (p.0 + nx, p.1 + ny)
}
