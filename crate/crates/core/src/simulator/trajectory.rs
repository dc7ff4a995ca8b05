//! Constant-speed drives along the corridor with a smooth lane wander.

use super::scene::{X_MAX, X_MIN};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<(f64, f64)>,
    pub speed: f64,
    pub dt: f64,
}

/// Speed is drawn from `[v_min, v_max]`; the lateral offset follows
/// `y_c + A·sin(ωt + φ)` and each step advances exactly `v·dt` along the
/// path, reflecting at the corridor ends.
pub fn sample_trajectory(rng: &mut Rng, steps: usize, dt: f64, v_min: f64, v_max: f64) -> Trajectory {
    let speed = rng.uniform_in(v_min, v_max);
    let mut x = rng.uniform_in(X_MIN, X_MAX);
    let mut dir = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
    let y_c = rng.uniform_in(9.5, 10.5);
    let amp = rng.uniform_in(0.0, 0.5);
    let omega = rng.uniform_in(0.2, 0.6);
    let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let lateral = |t: usize| y_c + amp * libm::sin(omega * t as f64 * dt + phase);

    let step = speed * dt;
    let mut poses = Vec::with_capacity(steps);
    poses.push((x, lateral(0)));
    for t in 1..steps {
        let y = lateral(t);
        let dy = y - poses[t - 1].1;
        x += dir * (step * step - dy * dy).max(0.0).sqrt();
        if x > X_MAX {
            x = 2.0 * X_MAX - x;
            dir = -1.0;
        } else if x < X_MIN {
            x = 2.0 * X_MIN - x;
            dir = 1.0;
        }
        poses.push((x, y));
    }
    Trajectory { poses, speed, dt }
}
