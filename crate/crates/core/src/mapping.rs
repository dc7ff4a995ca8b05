//! LiDAR point aggregation in the BS frame, top-down occupancy raster and
//! trajectory overlay.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::simulator::Snapshot;

/// Axis-aligned map window in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    /// Corridor plus a margin, BS at the origin.
    pub const DEFAULT: Extent = Extent {
        x_min: -64.0,
        x_max: 64.0,
        y_min: -2.0,
        y_max: 16.0,
    };

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub points: Vec<[f32; 3]>,
    pub snapshots: usize,
}

fn voxel_key(p: &[f32; 3], v: f64) -> [i64; 3] {
    p.map(|c| (c as f64 / v).floor() as i64)
}

/// Keeps the first point of every `voxel`-sized cube, in input order.
pub fn thin(points: &[[f32; 3]], voxel: f64) -> Vec<[f32; 3]> {
    if voxel <= 0.0 {
        return points.to_vec();
    }
    let mut seen = HashSet::with_capacity(points.len());
    points.iter().filter(|p| seen.insert(voxel_key(p, voxel))).copied().collect()
}

/// Concatenates all scans (already in the BS frame), drops points outside
/// `extent` and optionally thins them.
pub fn aggregate_map(snaps: &[&Snapshot], extent: &Extent, voxel: Option<f64>) -> PointMap {
    let mut points = Vec::with_capacity(snaps.len() * crate::simulator::sensors::LIDAR_POINTS);
    for s in snaps {
        for p in s.lidar.chunks_exact(3) {
            if p.iter().all(|c| c.is_finite()) && extent.contains(p[0] as f64, p[1] as f64) {
                points.push([p[0], p[1], p[2]]);
            }
        }
    }
    if let Some(v) = voxel {
        points = thin(&points, v);
    }
    PointMap {
        points,
        snapshots: snaps.len(),
    }
}

/// Hit counts on a regular grid; row 0 is the southernmost.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub cell: f64,
    /// Index of the first column/row relative to the cell containing the origin.
    pub col0: i64,
    pub row0: i64,
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl OccupancyGrid {
    /// Column/row of a world point relative to the cell containing the origin.
    pub fn cell_of(cell: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell).floor() as i64, (y / cell).floor() as i64)
    }

    pub fn count(&self, col: i64, row: i64) -> u32 {
        let (c, r) = (col - self.col0, row - self.row0);
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            return 0;
        }
        self.counts[r as usize * self.width + c as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Drops z and bins every point with floor indexing over `extent`.
pub fn rasterize(map: &PointMap, extent: &Extent, cell: f64) -> Result<OccupancyGrid> {
    if !(cell > 0.0) {
        return Err(CoreError::Config(format!("cell size must be positive, got {cell}")));
    }
    if map.points.is_empty() {
        return Err(CoreError::Data("cannot rasterize an empty map".into()));
    }
    let (col0, row0) = OccupancyGrid::cell_of(cell, extent.x_min, extent.y_min);
    let width = ((extent.x_max / cell).ceil() as i64 - col0) as usize;
    let height = ((extent.y_max / cell).ceil() as i64 - row0) as usize;
    let mut counts = vec![0u32; width * height];
    for p in &map.points {
        let (c, r) = OccupancyGrid::cell_of(cell, p[0] as f64, p[1] as f64);
        let (c, r) = (c - col0, r - row0);
        if c < 0 || r < 0 || c as usize >= width || r as usize >= height {
            return Err(CoreError::Data(format!("point ({}, {}) lies outside the map extent", p[0], p[1])));
        }
        counts[r as usize * width + c as usize] += 1;
    }
    Ok(OccupancyGrid {
        cell,
        col0,
        row0,
        width,
        height,
        counts,
    })
}

/// Affine world → pixel map: `u = ax·x + bx`, `v = ay·y + by` (north up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelTransform {
    pub ax: f64,
    pub bx: f64,
    pub ay: f64,
    pub by: f64,
}

impl PixelTransform {
    pub fn for_grid(grid: &OccupancyGrid, scale: usize) -> Self {
        let k = scale as f64 / grid.cell;
        let top = (grid.row0 + grid.height as i64) as f64 * grid.cell;
        Self {
            ax: k,
            bx: -(grid.col0 as f64) * grid.cell * k,
            ay: -k,
            by: top * k,
        }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        ((self.ax * x + self.bx).floor() as i64, (self.ay * y + self.by).floor() as i64)
    }

    pub fn to_world(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.bx) / self.ax, (v - self.by) / self.ay)
    }
}

pub const TRUTH_RGB: [u8; 3] = [230, 40, 40];
pub const PRED_RGB: [u8; 3] = [40, 170, 255];

/// RGB raster with its world transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub transform: PixelTransform,
}

impl Image {
    pub fn pixel(&self, u: usize, v: usize) -> [u8; 3] {
        let i = 3 * (v * self.width + u);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, u: i64, v: i64, c: [u8; 3]) {
        if u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height {
            let i = 3 * (v as usize * self.width + u as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham segment, endpoints included.
    fn line(&mut self, (mut u0, mut v0): (i64, i64), (u1, v1): (i64, i64), c: [u8; 3]) {
        let (du, dv) = ((u1 - u0).abs(), -(v1 - v0).abs());
        let (su, sv) = (if u0 < u1 { 1 } else { -1 }, if v0 < v1 { 1 } else { -1 });
        let mut err = du + dv;
        loop {
            self.put(u0, v0, c);
            if u0 == u1 && v0 == v1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dv {
                err += dv;
                u0 += su;
            }
            if e2 <= du {
                err += du;
                v0 += sv;
            }
        }
    }

    pub fn polyline(&mut self, pts: &[[f32; 2]], c: [u8; 3]) {
        let px: Vec<(i64, i64)> = pts.iter().map(|p| self.transform.to_pixel(p[0] as f64, p[1] as f64)).collect();
        if let [only] = px[..] {
            self.put(only.0, only.1, c);
        }
        for w in px.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Log-scaled gray level `255·ln(1+c)/ln(1+c_max)`.
pub fn gray_level(c: u32, c_max: u32) -> u8 {
    if c_max == 0 {
        return 0;
    }
    (255.0 * (c as f64).ln_1p() / (c_max as f64).ln_1p()).round() as u8
}

/// Grid as grayscale, `scale` pixels per cell, then one truth and one
/// prediction polyline per sequence (prediction drawn last).
pub fn overlay(grid: &OccupancyGrid, truth: &[Vec<[f32; 2]>], pred: &[Vec<[f32; 2]>], scale: usize) -> Result<Image> {
    if truth.len() != pred.len() || truth.iter().zip(pred).any(|(a, b)| a.len() != b.len()) {
        return Err(CoreError::Data("truth and predicted trajectories are misaligned".into()));
    }
    let scale = scale.max(1);
    let (width, height) = (grid.width * scale, grid.height * scale);
    let cmax = grid.max();
    let mut rgb = vec![0u8; width * height * 3];
    for v in 0..height {
        let row = grid.height - 1 - v / scale;
        for u in 0..width {
            let g = gray_level(grid.counts[row * grid.width + u / scale], cmax);
            rgb[3 * (v * width + u)..3 * (v * width + u) + 3].fill(g);
        }
    }
    let mut img = Image {
        width,
        height,
        rgb,
        transform: PixelTransform::for_grid(grid, scale),
    };
    for t in truth {
        img.polyline(t, TRUTH_RGB);
    }
    for p in pred {
        img.polyline(p, PRED_RGB);
    }
    Ok(img)
}

pub const TRAJECTORY_HEADER: &str = "t,x_true,y_true,x_pred,y_pred";

/// One row per snapshot, shortest round-trip float formatting.
pub fn trajectories_csv(t: &[u32], truth: &[[f32; 2]], pred: &[[f32; 2]]) -> Result<String> {
    if t.len() != truth.len() || truth.len() != pred.len() {
        return Err(CoreError::Data("trajectory columns have different lengths".into()));
    }
    let mut s = String::with_capacity(48 * t.len());
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for ((t, a), b) in t.iter().zip(truth).zip(pred) {
        let _ = writeln!(s, "{t},{},{},{},{}", a[0], a[1], b[0], b[1]);
    }
    Ok(s)
}

/// Systematic offset of the prediction: mean of `pred − truth` and the
/// largest per-snapshot Euclidean error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub bias: [f64; 2],
    pub max_error: f64,
}

pub fn drift_summary(truth: &[[f32; 2]], pred: &[[f32; 2]]) -> Result<Drift> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(CoreError::Data(format!(
            "drift needs aligned non-empty trajectories, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let (mut sx, mut sy, mut max) = (0.0, 0.0, 0.0f64);
    for (a, b) in truth.iter().zip(pred) {
        let (dx, dy) = (b[0] as f64 - a[0] as f64, b[1] as f64 - a[1] as f64);
        sx += dx;
        sy += dy;
        max = max.max(dx.hypot(dy));
    }
    let n = truth.len() as f64;
    Ok(Drift {
        bias: [sx / n, sy / n],
        max_error: max,
    })
}

/// Contents of `map_meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub extent: Extent,
    pub cell: f64,
    pub scale: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub transform: PixelTransform,
    pub points: usize,
    pub snapshots: usize,
    pub drift: Drift,
    pub config_hash: String,
    pub checkpoint: String,
}
