//! Anchor-relative box offsets.
//!
//! Center offsets are absolute differences, size offsets are relative to the
//! anchor size, and the yaw offset is the wrapped angle difference.

use super::{wrap_angle, OrientedBox3D};

/// Smallest size a decoded box may take.
pub const MIN_DECODED_SIZE: f64 = 1e-3;

/// `(Δx, Δy, Δz, Δl, Δw, Δh, Δθ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxOffsets(pub [f64; 7]);

impl BoxOffsets {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: OrientedBox3D,
    /// Set when a size came out non-positive and was clamped.
    pub clamped: bool,
}

pub fn encode(gt: &OrientedBox3D, anchor: &OrientedBox3D) -> BoxOffsets {
    let mut d = [0.0; 7];
    for k in 0..3 {
        d[k] = gt.center[k] - anchor.center[k];
        d[3 + k] = (gt.sizes[k] - anchor.sizes[k]) / anchor.sizes[k];
    }
    d[6] = wrap_angle(gt.yaw - anchor.yaw);
    BoxOffsets(d)
}

pub fn decode(offsets: &BoxOffsets, anchor: &OrientedBox3D) -> Decoded {
    let d = &offsets.0;
    let mut center = [0.0; 3];
    let mut sizes = [0.0; 3];
    let mut clamped = false;
    for k in 0..3 {
        center[k] = anchor.center[k] + d[k];
        let s = anchor.sizes[k] + anchor.sizes[k] * d[3 + k];
        sizes[k] = if s > 0.0 {
            s
        } else {
            clamped = true;
            MIN_DECODED_SIZE
        };
    }
    Decoded {
        bbox: OrientedBox3D::new_unchecked(center, sizes, anchor.yaw + d[6]),
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_encode_to_zero() {
        let a = OrientedBox3D::new([1.0, 2.0, 3.0], [3.9, 1.6, 1.56], 0.4).unwrap();
        assert_eq!(encode(&a, &a), BoxOffsets([0.0; 7]));
        assert_eq!(decode(&BoxOffsets::default(), &a).bbox, a);
    }

    #[test]
    fn worked_example() {
        let anchor = OrientedBox3D::new([0.0, 0.0, 10.0], [3.9, 1.6, 1.56], 0.0).unwrap();
        let gt = OrientedBox3D::new([0.5, 0.0, 10.0], [4.29, 1.6, 1.56], 0.1).unwrap();
        let d = encode(&gt, &anchor).0;
        let want = [0.5, 0.0, 0.0, 0.1, 0.0, 0.0, 0.1];
        for k in 0..7 {
            assert!((d[k] - want[k]).abs() < 1e-12, "{k}: {} vs {}", d[k], want[k]);
        }
    }

    #[test]
    fn negative_size_is_clamped_and_flagged() {
        let anchor = OrientedBox3D::new([0.0; 3], [3.9, 1.6, 1.56], 0.0).unwrap();
        let mut d = [0.0; 7];
        d[3] = -1.5;
        let out = decode(&BoxOffsets(d), &anchor);
        assert!(out.clamped);
        assert_eq!(out.bbox.sizes[0], MIN_DECODED_SIZE);
        assert_eq!(out.bbox.sizes[1], 1.6);
    }

    #[test]
    fn yaw_difference_wraps() {
        let anchor = OrientedBox3D::new([0.0; 3], [1.0; 3], 3.0).unwrap();
        let gt = OrientedBox3D::new([0.0; 3], [1.0; 3], -3.0).unwrap();
        let d = encode(&gt, &anchor).0[6];
        assert!((d - (2.0 * std::f64::consts::PI - 6.0)).abs() < 1e-12);
    }
}
