//! Training-time jitter of proposals and frustum points.
//!
//! Point augmentation works in the frustum frame: flipping mirrors across the
//! vertical plane through the frustum axis (`x -> -x`) and shifting moves
//! everything along the axis (`z -> z + d`). Boxes are transformed the same
//! way so regression targets stay consistent.

use super::types::RegionProposal2D;
use crate::boxes::OrientedBox3D;
use crate::geometry::linalg::Vec3;
use rand::Rng;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Center jitter as a fraction of the box width/height.
    pub jitter_frac: f64,
    /// Scale factor drawn from `[1 - scale_frac, 1 + scale_frac]`.
    pub scale_frac: f64,
    pub flip_prob: f64,
    /// Axis shift drawn from `[-shift_max, shift_max]` meters.
    pub shift_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_frac: 0.1,
            scale_frac: 0.1,
            flip_prob: 0.5,
            shift_max: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            jitter_frac: 0.0,
            scale_frac: 0.0,
            flip_prob: 0.0,
            shift_max: 0.0,
        }
    }
}

/// What [`augment_points`] did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointAugment {
    pub flipped: bool,
    pub shift: f64,
}

pub fn augment_proposal<R: Rng + ?Sized>(p: &RegionProposal2D, rng: &mut R, cfg: &AugmentConfig) -> RegionProposal2D {
    if cfg.jitter_frac == 0.0 && cfg.scale_frac == 0.0 {
        return p.clone();
    }
    let (w, h) = (p.width(), p.height());
    let [cx, cy] = p.center();
    let j = cfg.jitter_frac;
    let cx = cx + rng.random_range(-j..=j) * w;
    let cy = cy + rng.random_range(-j..=j) * h;
    let s = 1.0 + rng.random_range(-cfg.scale_frac..=cfg.scale_frac);
    let (hw, hh) = (0.5 * w * s, 0.5 * h * s);
    RegionProposal2D {
        image_box: [cx - hw, cy - hh, cx + hw, cy + hh],
        ..p.clone()
    }
}

pub fn flip_points(points: &mut [Vec3]) {
    for p in points {
        p[0] = -p[0];
    }
}

/// Mirror image of a box across the `x = 0` plane.
pub fn flip_box(b: &OrientedBox3D) -> OrientedBox3D {
    OrientedBox3D::new_unchecked([-b.center[0], b.center[1], b.center[2]], b.sizes, PI - b.yaw)
}

pub fn shift_points(points: &mut [Vec3], d: f64) {
    for p in points {
        p[2] += d;
    }
}

pub fn shift_box(b: &OrientedBox3D, d: f64) -> OrientedBox3D {
    b.translated([0.0, 0.0, d])
}

/// Randomly flips and shifts frustum-frame points and their boxes in place.
pub fn augment_points<R: Rng + ?Sized>(
    points: &mut [Vec3],
    boxes: &mut [OrientedBox3D],
    rng: &mut R,
    cfg: &AugmentConfig,
) -> PointAugment {
    let mut record = PointAugment::default();
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        flip_points(points);
        for b in boxes.iter_mut() {
            *b = flip_box(b);
        }
        record.flipped = true;
    }
    if cfg.shift_max > 0.0 {
        let d = rng.random_range(-cfg.shift_max..=cfg.shift_max);
        shift_points(points, d);
        for b in boxes.iter_mut() {
            *b = shift_box(b, d);
        }
        record.shift = d;
    }
    record
}
