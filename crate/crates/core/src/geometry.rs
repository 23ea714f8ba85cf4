//! Planar poses and axis-aligned rectangles.

use std::f64::consts::PI;

use autodiff::Rigid2;
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Planar pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Se2 {
    pub const IDENTITY: Se2 = Se2 {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn apply_inverse(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se2) -> Se2 {
        let (x, y) = self.apply(other.x, other.y);
        Se2::new(x, y, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Se2 {
        let (x, y) = self.apply_inverse(0.0, 0.0);
        Se2::new(x, y, -self.yaw)
    }

    /// Pose of `self` expressed in the frame of `ego`: `ego⁻¹ ∘ self`.
    pub fn relative_to(&self, ego: &Se2) -> Se2 {
        ego.inverse().compose(self)
    }

    /// The same motion with translation expressed in grid cells of size
    /// `resolution` meters.
    pub fn to_voxel_transform(&self, resolution: f64) -> Rigid2 {
        if *self == Se2::IDENTITY {
            return Rigid2::IDENTITY;
        }
        Rigid2::new(self.yaw, self.x / resolution, self.y / resolution)
    }
}

/// Axis-aligned rectangle: `width` spans x, `length` spans y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub length: f64,
}

impl Rect {
    pub fn new(cx: f64, cy: f64, width: f64, length: f64) -> Self {
        Self {
            cx,
            cy,
            width,
            length,
        }
    }

    pub fn from_bounds(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self::new(
            0.5 * (min_x + max_x),
            0.5 * (min_y + max_y),
            max_x - min_x,
            max_y - min_y,
        )
    }

    pub fn min_x(&self) -> f64 {
        self.cx - 0.5 * self.width
    }
    pub fn max_x(&self) -> f64 {
        self.cx + 0.5 * self.width
    }
    pub fn min_y(&self) -> f64 {
        self.cy - 0.5 * self.length
    }
    pub fn max_y(&self) -> f64 {
        self.cy + 0.5 * self.length
    }

    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.min_x(), self.min_y()),
            (self.max_x(), self.min_y()),
            (self.max_x(), self.max_y()),
            (self.min_x(), self.max_y()),
        ]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x() && x <= self.max_x() && y >= self.min_y() && y <= self.max_y()
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max_x().min(other.max_x()) - self.min_x().max(other.min_x());
        let l = self.max_y().min(other.max_y()) - self.min_y().max(other.min_y());
        if w <= 0.0 || l <= 0.0 {
            0.0
        } else {
            w * l
        }
    }

    /// True when the rectangles, each grown by `gap / 2`, share positive area.
    pub fn overlaps(&self, other: &Rect, gap: f64) -> bool {
        self.min_x() - gap < other.max_x()
            && other.min_x() - gap < self.max_x()
            && self.min_y() - gap < other.max_y()
            && other.min_y() - gap < self.max_y()
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Euclidean distance from a point to the rectangle (zero inside).
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min_x() - x).max(0.0).max(x - self.max_x());
        let dy = (self.min_y() - y).max(0.0).max(y - self.max_y());
        dx.hypot(dy)
    }

    /// Axis-aligned bounding box of this rectangle after mapping its corners
    /// through `f`.
    pub fn rebox(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Rect {
        let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
        for (x, y) in self.corners() {
            let (u, v) = f(x, y);
            b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
        }
        Rect::from_bounds(b[0], b[1], b[2], b[3])
    }

    /// First intersection of the ray `origin + t·dir` (t > 0) with the
    /// rectangle boundary, by the slab method.
    pub fn ray_hit(&self, ox: f64, oy: f64, dx: f64, dy: f64) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for (o, d, lo, hi) in [
            (ox, dx, self.min_x(), self.max_x()),
            (oy, dy, self.min_y(), self.max_y()),
        ] {
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let (t1, t2) = ((lo - o) / d, (hi - o) / d);
                t_near = t_near.max(t1.min(t2));
                t_far = t_far.min(t1.max(t2));
            }
        }
        if t_near > t_far || t_far <= 0.0 {
            return None;
        }
        Some(if t_near > 0.0 { t_near } else { t_far })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_identical_and_disjoint() {
        let a = Rect::new(0.0, 0.0, 2.0, 4.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(10.0, 0.0, 2.0, 4.0)), 0.0);
        let b = Rect::new(1.0, 0.0, 2.0, 4.0);
        assert!((a.iou(&b) - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ray_hits_near_face() {
        let r = Rect::new(5.0, 0.0, 2.0, 2.0);
        assert_eq!(r.ray_hit(0.0, 0.0, 1.0, 0.0), Some(4.0));
        assert_eq!(r.ray_hit(0.0, 0.0, -1.0, 0.0), None);
        assert_eq!(r.ray_hit(0.0, 5.0, 1.0, 0.0), None);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(
            x in -50.0f64..50.0, y in -50.0f64..50.0, yaw in -4.0f64..4.0
        ) {
            let p = Se2::new(x, y, yaw);
            let id = p.compose(&p.inverse());
            prop_assert!(id.x.abs() < 1e-12 && id.y.abs() < 1e-12 && id.yaw.abs() < 1e-12);
            prop_assert!(p.yaw > -PI && p.yaw <= PI);
        }

        #[test]
        fn relative_pose_maps_points_consistently(
            ax in -20.0f64..20.0, ay in -20.0f64..20.0, ayaw in -3.0f64..3.0,
            bx in -20.0f64..20.0, by in -20.0f64..20.0, byaw in -3.0f64..3.0,
            px in -10.0f64..10.0, py in -10.0f64..10.0,
        ) {
            let sender = Se2::new(ax, ay, ayaw);
            let ego = Se2::new(bx, by, byaw);
            let rel = sender.relative_to(&ego);
            let (wx, wy) = sender.apply(px, py);
            let (ex, ey) = ego.apply_inverse(wx, wy);
            let (rx, ry) = rel.apply(px, py);
            prop_assert!((ex - rx).abs() < 1e-9 && (ey - ry).abs() < 1e-9);
        }
    }
}
