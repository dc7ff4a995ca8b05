//! Planar primitives: axis-aligned rectangles, segment/ray intersection.

/// Axis-aligned rectangle with a radar/LiDAR reflectivity in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub refl: f64,
}

impl Rect {
    pub fn x_min(&self) -> f64 {
        self.cx - self.hx
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.hx
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.hy
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.hy
    }

    /// Closed-set overlap test.
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x_min() <= o.x_max() && o.x_min() <= self.x_max() && self.y_min() <= o.y_max() && o.y_min() <= self.y_max()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.hx && (y - self.cy).abs() <= self.hy
    }

    /// Parametric interval `[t_in, t_out]` where `o + t·d` lies in the
    /// rectangle, clipped to `[t_lo, t_hi]`.
    fn clip(&self, o: (f64, f64), d: (f64, f64), t_lo: f64, t_hi: f64) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (t_lo, t_hi);
        for (p, dp, lo, hi) in [(o.0, d.0, self.x_min(), self.x_max()), (o.1, d.1, self.y_min(), self.y_max())] {
            if dp == 0.0 {
                if p < lo || p > hi {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((lo - p) / dp, (hi - p) / dp);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Does the closed segment `a → b` touch the rectangle?
    pub fn hits_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        self.clip(a, (b.0 - a.0, b.1 - a.1), 0.0, 1.0).is_some()
    }

    /// Entry distance of a ray with unit direction `d` starting outside.
    pub fn ray_entry(&self, o: (f64, f64), d: (f64, f64)) -> Option<f64> {
        self.clip(o, d, 0.0, f64::INFINITY).map(|(t0, _)| t0)
    }
}

/// First intersection distance of a ray (unit `d`) with a circle.
pub fn ray_disc(o: (f64, f64), d: (f64, f64), c: (f64, f64), r: f64) -> Option<f64> {
    let (ox, oy) = (o.0 - c.0, o.1 - c.1);
    let b = d.0 * ox + d.1 * oy;
    let cc = ox * ox + oy * oy - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Distance along a ray to the horizontal line `y = y0`, if ahead.
pub fn ray_hline(o: (f64, f64), d: (f64, f64), y0: f64) -> Option<f64> {
    if d.1 == 0.0 {
        return None;
    }
    let t = (y0 - o.1) / d.1;
    (t > 0.0).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(cx: f64, cy: f64, hx: f64, hy: f64) -> Rect {
        Rect { cx, cy, hx, hy, refl: 1.0 }
    }

    #[test]
    fn segment_cases() {
        let b = r(0.0, 5.0, 1.0, 1.0);
        assert!(b.hits_segment((0.0, 0.0), (0.0, 10.0)));
        assert!(!b.hits_segment((0.0, 0.0), (0.0, 3.9)));
        assert!(!b.hits_segment((5.0, 0.0), (5.0, 10.0)));
        assert!(b.hits_segment((-1.0, 0.0), (-1.0, 10.0)));
    }

    #[test]
    fn ray_cases() {
        let b = r(0.0, 5.0, 1.0, 1.0);
        assert_eq!(b.ray_entry((0.0, 0.0), (0.0, 1.0)), Some(4.0));
        assert_eq!(b.ray_entry((0.0, 0.0), (0.0, -1.0)), None);
        assert_eq!(ray_disc((0.0, 0.0), (1.0, 0.0), (5.0, 0.0), 1.0), Some(4.0));
        assert_eq!(ray_hline((0.0, 0.0), (0.0, 1.0), 3.0), Some(3.0));
    }
}
