//! Street-corridor geometry in the BS-centric frame (BS at the origin).

use super::geometry::Rect;
use crate::error::{CoreError, Result};
use crate::rng::Rng;

pub const X_MIN: f64 = -60.0;
pub const X_MAX: f64 = 60.0;
/// Near wall, between BS and road; built from panels with gaps.
pub const NEAR_WALL_Y: f64 = 3.0;
/// Far wall, continuous; source of the first-order reflection.
pub const FAR_WALL_Y: f64 = 13.0;
pub const LANE_Y_MIN: f64 = 4.0;
pub const LANE_Y_MAX: f64 = 12.0;
pub const PANEL_HALF_LEN: f64 = 2.0;
/// Panel centre spacing: 4 m panels separated by 2 m gaps.
pub const PANEL_PITCH: f64 = 6.0;

const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub static_blockers: Vec<Rect>,
    pub seed: u64,
}

/// True where the near wall has a panel at abscissa `x`.
pub fn near_wall_at(x: f64) -> bool {
    if !(X_MIN..=X_MAX).contains(&x) {
        return false;
    }
    let k = (x / PANEL_PITCH).round();
    (x - k * PANEL_PITCH).abs() <= PANEL_HALF_LEN
}

/// Places `k` non-overlapping static blockers in the strip between the
/// near wall and the lane.
pub fn build_scene(k: usize, seed: u64) -> Result<Scene> {
    let mut rng = Rng::new(seed);
    let mut placed: Vec<Rect> = Vec::with_capacity(k);
    for i in 0..k {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cand = Rect {
                cx: rng.uniform_in(-25.0, 25.0),
                cy: rng.uniform_in(5.5, 6.5),
                hx: rng.uniform_in(1.0, 2.0),
                hy: rng.uniform_in(0.6, 0.9),
                refl: rng.uniform_in(0.5, 1.0),
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(CoreError::Generation(format!(
                "could not place static blocker {} of {k} after {MAX_PLACEMENT_TRIES} tries",
                i + 1
            )));
        }
    }
    Ok(Scene {
        static_blockers: placed,
        seed,
    })
}

/// Bus-like blocker moving along x and wrapping at the corridor ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicBlocker {
    pub start: Rect,
    pub vx: f64,
}

impl DynamicBlocker {
    pub fn sample(rng: &mut Rng) -> Self {
        let start = Rect {
            cx: rng.uniform_in(X_MIN, X_MAX),
            cy: rng.uniform_in(5.5, 6.5),
            hx: rng.uniform_in(2.0, 3.0),
            hy: rng.uniform_in(1.0, 1.25),
            refl: rng.uniform_in(0.6, 1.0),
        };
        let speed = rng.uniform_in(3.0, 8.0);
        let vx = if rng.uniform() < 0.5 { speed } else { -speed };
        Self { start, vx }
    }

    pub fn at(&self, time: f64) -> Rect {
        let span = X_MAX - X_MIN;
        let cx = (self.start.cx + self.vx * time - X_MIN).rem_euclid(span) + X_MIN;
        Rect { cx, ..self.start }
    }
}

/// Blocker layout at one instant: static plus moved dynamic blockers.
#[derive(Clone, Debug)]
pub struct Frame<'a> {
    pub scene: &'a Scene,
    pub dynamic: Vec<Rect>,
}

impl<'a> Frame<'a> {
    pub fn new(scene: &'a Scene, dynamic: &[DynamicBlocker], time: f64) -> Self {
        Self {
            scene,
            dynamic: dynamic.iter().map(|d| d.at(time)).collect(),
        }
    }

    pub fn static_only(scene: &'a Scene) -> Self {
        Self {
            scene,
            dynamic: Vec::new(),
        }
    }

    pub fn blockers(&self) -> impl Iterator<Item = &Rect> {
        self.scene.static_blockers.iter().chain(&self.dynamic)
    }

    /// Does the BS→`p` segment cross any blocker?
    pub fn los_blocked(&self, p: (f64, f64)) -> bool {
        self.blockers().any(|b| b.hits_segment((0.0, 0.0), p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_and_gaps() {
        assert!(near_wall_at(0.0));
        assert!(near_wall_at(2.0));
        assert!(!near_wall_at(3.0));
        assert!(near_wall_at(6.0));
        assert!(!near_wall_at(61.0));
    }

    #[test]
    fn dynamic_blocker_wraps() {
        let d = DynamicBlocker {
            start: Rect { cx: 59.0, cy: 5.5, hx: 3.0, hy: 1.0, refl: 1.0 },
            vx: 2.0,
        };
        assert!((d.at(1.0).cx - (-59.0)).abs() < 1e-9);
        assert!((d.at(0.0).cx - 59.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_placement_errors() {
        assert!(matches!(build_scene(200, 1), Err(CoreError::Generation(_))));
    }
}
