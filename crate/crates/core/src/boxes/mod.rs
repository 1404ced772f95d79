//! Oriented 3D boxes and the algebra built on them.
//!
//! Frame convention (KITTI rectified camera): `x` right, `y` down along
//! gravity, `z` forward. A box's yaw rotates it about the `y` axis; at yaw 0
//! the length runs along `+x`, the width along `+z` and the height along `y`.
//! Box centers are volumetric centers.

mod anchors;
mod codec;
mod iou;
mod nms;

pub use anchors::{build_anchors, yaw_bin_centers, AnchorSet};
pub use codec::{decode, encode, BoxOffsets, Decoded, MIN_DECODED_SIZE};
pub use iou::{bev_polygon, clip_convex, iou_3d, iou_bev, polygon_area};
pub use nms::nms_rotated;

use crate::geometry::linalg::{self, Vec3};
use std::f64::consts::PI;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub center: Vec3,
    /// `(l, w, h)`.
    pub sizes: Vec3,
    pub yaw: f64,
}

impl OrientedBox3D {
    /// Builds a box, normalizing the yaw into `[-π, π)`.
    ///
    /// Sizes must be strictly positive and every field finite.
    pub fn new(center: Vec3, sizes: Vec3, yaw: f64) -> crate::Result<Self> {
        if !center.iter().chain(sizes.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(crate::Error::Invalid(format!(
                "non-finite box parameters center={center:?} sizes={sizes:?} yaw={yaw}"
            )));
        }
        if sizes.iter().any(|&s| s <= 0.0) {
            return Err(crate::Error::Invalid(format!(
                "box sizes must be positive, got {sizes:?}"
            )));
        }
        Ok(Self::new_unchecked(center, sizes, yaw))
    }

    pub(crate) fn new_unchecked(center: Vec3, sizes: Vec3, yaw: f64) -> Self {
        OrientedBox3D {
            center,
            sizes,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn length(&self) -> f64 {
        self.sizes[0]
    }

    pub fn width(&self) -> f64 {
        self.sizes[1]
    }

    pub fn height(&self) -> f64 {
        self.sizes[2]
    }

    pub fn volume(&self) -> f64 {
        self.sizes[0] * self.sizes[1] * self.sizes[2]
    }

    /// Unit vector of the length axis.
    pub fn length_axis(&self) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        [c, 0.0, -s]
    }

    /// Same box translated by `t`.
    pub fn translated(&self, t: Vec3) -> Self {
        OrientedBox3D {
            center: linalg::add(self.center, t),
            ..*self
        }
    }

    /// Same box with all three sizes multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        OrientedBox3D {
            sizes: linalg::scale(self.sizes, factor),
            ..*self
        }
    }

    /// The same physical box described with the opposite heading.
    pub fn flipped(&self) -> Self {
        Self::new_unchecked(self.center, self.sizes, self.yaw + PI)
    }

    /// Expresses `p` in the box's local axes `(length, vertical, width)`.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = linalg::sub(p, self.center);
        let r = linalg::rot_y(self.yaw);
        linalg::mat_vec(&linalg::transpose(&r), d)
    }

    /// Closed containment test.
    pub fn contains(&self, p: Vec3) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.sizes[0] * 0.5 && q[1].abs() <= self.sizes[2] * 0.5 && q[2].abs() <= self.sizes[1] * 0.5
    }

    /// The eight corners: top face counterclockwise seen from above starting
    /// at `(+l/2, +w/2)`, then the bottom face in the same order.
    pub fn corners(&self) -> [Vec3; 8] {
        let [l, w, h] = self.sizes;
        let (a, b, v) = (l * 0.5, w * 0.5, h * 0.5);
        let local: [(f64, f64); 4] = [(a, b), (-a, b), (-a, -b), (a, -b)];
        let r = linalg::rot_y(self.yaw);
        let mut out = [[0.0; 3]; 8];
        for (i, &(x, z)) in local.iter().enumerate() {
            out[i] = linalg::add(self.center, linalg::mat_vec(&r, [x, -v, z]));
            out[i + 4] = linalg::add(self.center, linalg::mat_vec(&r, [x, v, z]));
        }
        out
    }

    /// Inverse of [`corners`](Self::corners).
    pub fn from_corners(c: &[Vec3; 8]) -> Self {
        let mut center = [0.0; 3];
        for p in c {
            center = linalg::add(center, *p);
        }
        center = linalg::scale(center, 1.0 / 8.0);
        let along = linalg::sub(c[0], c[1]);
        let across = linalg::sub(c[0], c[3]);
        let vertical = linalg::sub(c[4], c[0]);
        let yaw = (-along[2]).atan2(along[0]);
        Self::new_unchecked(
            center,
            [linalg::norm(along), linalg::norm(across), linalg::norm(vertical)],
            yaw,
        )
    }
}
