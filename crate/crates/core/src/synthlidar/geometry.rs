use serde::{Deserialize, Serialize};

/// Planar rigid transform: pose of a frame in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Maps a point from this frame into the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.apply([other.x, other.y]);
        Pose2::new(t[0], t[1], self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }
}

/// Corners of a yawed rectangle, counter-clockwise.
pub fn rect_corners(center: [f64; 2], length: f64, width: f64, yaw: f64) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[a, b]| [center[0] + c * a - s * b, center[1] + s * a + c * b])
}

/// Separating-axis test for two convex quadrilaterals. Touching edges count
/// as overlapping.
pub fn rects_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let p = poly[i];
            let q = poly[(i + 1) % 4];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |r: &[[f64; 2]; 4]| {
                r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (alo, ahi) = proj(a);
            let (blo, bhi) = proj(b);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn inverse_composes_to_identity() {
        let p = Pose2::new(3.0, -2.0, 0.7);
        let id = p.compose(&p.inverse());
        assert!(close([id.x, id.y], [0.0, 0.0]));
        assert!(id.yaw.abs() < 1e-12);
        let q = [1.5, 4.0];
        assert!(close(p.inverse().apply(p.apply(q)), q));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = Pose2::new(1.0, 2.0, 0.3);
        let b = Pose2::new(-0.5, 0.25, -1.1);
        let q = [0.7, -0.2];
        assert!(close(a.compose(&b).apply(q), a.apply(b.apply(q))));
    }

    #[test]
    fn overlap_axis_aligned() {
        let a = rect_corners([0.0, 0.0], 2.0, 2.0, 0.0);
        let b = rect_corners([1.5, 0.0], 2.0, 2.0, 0.0);
        let c = rect_corners([2.5, 0.0], 2.0, 2.0, 0.0);
        assert!(rects_overlap(&a, &b));
        assert!(!rects_overlap(&a, &c));
        // rotated 45°: the diamond's tip reaches 1.414 along x
        let d = rect_corners([2.3, 0.0], 2.0, 2.0, std::f64::consts::FRAC_PI_4);
        assert!(rects_overlap(&a, &d));
    }

    #[test]
    fn wrap_into_half_open_interval() {
        for k in -5..5 {
            let a = 0.3 + k as f64 * std::f64::consts::TAU;
            assert!((wrap_angle(a) - 0.3).abs() < 1e-9);
        }
        assert!((wrap_angle(std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }
}
