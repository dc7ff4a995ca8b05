//! Received power per beam: direct path with distance loss and optional
//! blockage penalty, plus one specular reflection off the far wall.

use super::codebook::{BeamCodebook, NUM_BEAMS};
use super::scene::{Frame, FAR_WALL_Y};
use crate::rng::Rng;

/// Linear floor keeping exact array nulls finite in dB.
const FLOOR_LIN: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelParams {
    pub p0_db: f64,
    pub d0_m: f64,
    pub blockage_db: f64,
    pub reflection_db: f64,
    pub shadow_db: f64,
}

impl ChannelParams {
    /// Direct-path power before array gain, dB.
    pub fn los_term_db(&self, d: f64, blocked: bool) -> f64 {
        let pen = if blocked { self.blockage_db } else { 0.0 };
        self.p0_db - 20.0 * libm::log10(d / self.d0_m) - pen
    }

    fn reflection_term_db(&self, d: f64) -> f64 {
        self.p0_db - 20.0 * libm::log10(d / self.d0_m) + self.reflection_db
    }
}

/// Noise-free sweep for a vehicle at `p` (never the BS itself).
pub fn clean_power_db(params: &ChannelParams, cb: &BeamCodebook, p: (f64, f64), blocked: bool) -> [f64; NUM_BEAMS] {
    let d = libm::hypot(p.0, p.1);
    let img = (p.0, 2.0 * FAR_WALL_Y - p.1);
    let d_ref = libm::hypot(img.0, img.1);
    let los = libm::pow(10.0, params.los_term_db(d, blocked) / 10.0);
    let refl = libm::pow(10.0, params.reflection_term_db(d_ref) / 10.0);
    let (s_los, s_ref) = (p.0 / d, img.0 / d_ref);
    let mut out = [0.0; NUM_BEAMS];
    for (b, o) in out.iter_mut().enumerate() {
        let lin = los * cb.gain(s_los, b) + refl * cb.gain(s_ref, b) + FLOOR_LIN;
        *o = 10.0 * libm::log10(lin);
    }
    out
}

/// One sweep: clean power plus a log-normal shadowing term shared by all
/// beams of the snapshot (one normal draw).
pub fn simulate_power(frame: &Frame, params: &ChannelParams, cb: &BeamCodebook, p: (f64, f64), rng: &mut Rng) -> [f32; NUM_BEAMS] {
    let clean = clean_power_db(params, cb, p, frame.los_blocked(p));
    let shadow = rng.gaussian(0.0, params.shadow_db);
    clean.map(|v| (v + shadow) as f32)
}
