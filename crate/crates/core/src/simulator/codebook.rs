//! Uniform linear array with a 64-beam DFT-style receive codebook.

use std::f64::consts::PI;

pub const NUM_BEAMS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamCodebook {
    /// `sin φ_b`, uniform over `±sin 60°`, strictly increasing.
    pub sines: Vec<f64>,
    pub n_ant: usize,
}

impl BeamCodebook {
    pub fn new(n_ant: usize) -> Self {
        let s = libm::sin(60f64.to_radians());
        let sines = (0..NUM_BEAMS)
            .map(|b| -s + 2.0 * s * b as f64 / (NUM_BEAMS - 1) as f64)
            .collect();
        Self { sines, n_ant }
    }

    /// `|AF|² / N²` for a plane wave from `sin φ` on beam `b`, with
    /// half-wavelength spacing.
    pub fn gain(&self, sin_phi: f64, b: usize) -> f64 {
        let u = sin_phi - self.sines[b];
        let (mut re, mut im) = (0.0, 0.0);
        for n in 0..self.n_ant {
            let a = PI * n as f64 * u;
            re += libm::cos(a);
            im += libm::sin(a);
        }
        (re * re + im * im) / (self.n_ant * self.n_ant) as f64
    }

    /// Beam whose steering sine is closest to `sin φ` (ties → lower index).
    pub fn nearest(&self, sin_phi: f64) -> usize {
        let mut best = 0;
        for b in 1..NUM_BEAMS {
            if (self.sines[b] - sin_phi).abs() < (self.sines[best] - sin_phi).abs() {
                best = b;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_shape() {
        let cb = BeamCodebook::new(16);
        assert_eq!(cb.sines.len(), 64);
        assert!(cb.sines.windows(2).all(|w| w[0] < w[1]));
        assert!((cb.sines[63] - 3f64.sqrt() / 2.0).abs() < 1e-12);
        for b in [0, 17, 63] {
            assert!((cb.gain(cb.sines[b], b) - 1.0).abs() < 1e-12);
        }
    }
}
