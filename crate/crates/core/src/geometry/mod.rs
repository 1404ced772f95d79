//! Frustum frames and sliding slab sequences.
//!
//! A proposal's frustum frame rotates the rectified camera frame so the ray
//! through the proposal's pixel center becomes `+z`. Sliding a pair of planes
//! perpendicular to that axis with stride `s` and height `u` cuts the frustum
//! into slabs `[depth_min + t*s, depth_min + t*s + u)`; a point belongs to
//! every slab whose half-open interval contains its depth.

pub mod linalg;

use crate::boxes::{wrap_angle, OrientedBox3D};
use crate::io_data::{CameraCalib, RegionProposal2D};
use crate::{Error, Result};
use linalg::{Mat3, Vec3};

/// A rigid frame: `local = rotation * (world - origin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumFrame {
    pub rotation: Mat3,
    pub origin: Vec3,
    /// Angle added to a box's yaw when it is expressed in this frame: the
    /// gravity-axis component of `rotation`.
    pub yaw_offset: f64,
}

impl FrustumFrame {
    pub fn identity() -> Self {
        FrustumFrame {
            rotation: linalg::IDENTITY,
            origin: [0.0; 3],
            yaw_offset: 0.0,
        }
    }

    /// A pure rotation about the gravity axis around `origin`.
    pub fn from_yaw(origin: Vec3, yaw_offset: f64) -> Self {
        FrustumFrame {
            rotation: linalg::rot_y(yaw_offset),
            origin,
            yaw_offset,
        }
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        linalg::mat_vec(&self.rotation, linalg::sub(p, self.origin))
    }

    pub fn to_world(&self, q: Vec3) -> Vec3 {
        linalg::add(linalg::mat_vec(&linalg::transpose(&self.rotation), q), self.origin)
    }

    /// Box expressed in the frame. Centers map rigidly; the yaw is shifted by
    /// the frame's gravity-axis rotation so the map is an exact bijection even
    /// when the frame also pitches.
    pub fn box_to_local(&self, b: &OrientedBox3D) -> OrientedBox3D {
        OrientedBox3D::new_unchecked(self.to_local(b.center), b.sizes, wrap_angle(b.yaw + self.yaw_offset))
    }

    pub fn box_to_world(&self, b: &OrientedBox3D) -> OrientedBox3D {
        OrientedBox3D::new_unchecked(self.to_world(b.center), b.sizes, wrap_angle(b.yaw - self.yaw_offset))
    }
}

/// Camera-frame unit ray through the proposal's pixel center.
pub fn proposal_ray(proposal: &RegionProposal2D, calib: &CameraCalib) -> Result<Vec3> {
    let [u0, v0, u1, v1] = proposal.image_box;
    let m: Mat3 = [
        [calib.projection[0][0], calib.projection[0][1], calib.projection[0][2]],
        [calib.projection[1][0], calib.projection[1][1], calib.projection[1][2]],
        [calib.projection[2][0], calib.projection[2][1], calib.projection[2][2]],
    ];
    let inv = linalg::inverse(&m).ok_or_else(|| Error::Invalid("singular projection matrix".into()))?;
    let dir = linalg::mat_vec(&inv, [0.5 * (u0 + u1), 0.5 * (v0 + v1), 1.0]);
    Ok(linalg::normalize(dir))
}

/// Frame whose `+z` axis is the proposal's center ray: a yaw about the camera
/// `y` axis brings the ray into the `y-z` plane, then a pitch about `x`
/// aligns it with `z`. The origin is the camera center.
pub fn frustum_frame(proposal: &RegionProposal2D, calib: &CameraCalib) -> Result<FrustumFrame> {
    let r = proposal_ray(proposal, calib)?;
    let yaw = (-r[0]).atan2(r[2]);
    let rho = r[0].hypot(r[2]);
    let pitch = r[1].atan2(rho);
    Ok(FrustumFrame {
        rotation: linalg::mat_mul(&linalg::rot_x(pitch), &linalg::rot_y(yaw)),
        origin: [0.0; 3],
        yaw_offset: yaw,
    })
}

/// Slab stride `s` and height `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub stride: f64,
    pub height: f64,
}

impl Resolution {
    pub fn new(stride: f64, height: f64) -> Self {
        Resolution { stride, height }
    }
}

/// Number of slabs covering `[depth_min, depth_max)` with the given stride.
pub fn slab_count(depth_min: f64, depth_max: f64, stride: f64) -> usize {
    let r = (depth_max - depth_min) / stride;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * n.max(1.0) {
        n as usize
    } else {
        r.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrustumSequence {
    pub frame: FrustumFrame,
    pub stride: f64,
    pub height: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Points expressed in `frame`.
    pub points: Vec<Vec3>,
    /// Per-slab indices into `points`, ascending.
    pub groups: Vec<Vec<usize>>,
    /// Per-slab axis midpoints `(0, 0, start + u/2)`.
    pub centroids: Vec<Vec3>,
}

impl FrustumSequence {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn slab_start(&self, t: usize) -> f64 {
        self.depth_min + t as f64 * self.stride
    }

    /// Points of slab `t` relative to its centroid.
    pub fn relative_points(&self, t: usize) -> impl Iterator<Item = Vec3> + '_ {
        let c = self.centroids[t];
        self.groups[t].iter().map(move |&i| linalg::sub(self.points[i], c))
    }

    /// Centroids of a coarser sequence of `out_len` slabs covering the same
    /// range, each `len()/out_len` strides long and proportionally taller.
    pub fn header_centroids(&self, out_len: usize) -> Result<Vec<Vec3>> {
        if out_len == 0 || !self.len().is_multiple_of(out_len) {
            return Err(Error::Shape(format!(
                "header length {out_len} does not divide sequence length {}",
                self.len()
            )));
        }
        let f = (self.len() / out_len) as f64;
        Ok((0..out_len)
            .map(|t| {
                [
                    0.0,
                    0.0,
                    self.depth_min + t as f64 * self.stride * f + 0.5 * self.height * f,
                ]
            })
            .collect())
    }
}

fn validate(res: Resolution, depth_min: f64, depth_max: f64) -> Result<()> {
    if !(res.stride > 0.0) || !(res.height > 0.0) {
        return Err(Error::Config(format!(
            "slab stride and height must be positive, got s={} u={}",
            res.stride, res.height
        )));
    }
    if res.height < res.stride {
        return Err(Error::Config(format!(
            "slab height {} is smaller than stride {}",
            res.height, res.stride
        )));
    }
    if !(depth_max > depth_min) {
        return Err(Error::Config(format!("empty depth range [{depth_min}, {depth_max})")));
    }
    Ok(())
}

/// Groups points that are already expressed in `frame`.
pub fn build_sequence_local(
    local_points: Vec<Vec3>,
    frame: FrustumFrame,
    res: Resolution,
    depth_min: f64,
    depth_max: f64,
) -> Result<FrustumSequence> {
    validate(res, depth_min, depth_max)?;
    let count = slab_count(depth_min, depth_max, res.stride);
    let mut groups = vec![Vec::new(); count];
    let start = |t: usize| depth_min + t as f64 * res.stride;
    for (i, p) in local_points.iter().enumerate() {
        let z = p[2];
        if !(z >= depth_min && z < depth_max) {
            continue;
        }
        // Candidate window, widened by one on each side against rounding;
        // the exact half-open test below decides membership.
        let hi = ((z - depth_min) / res.stride).floor() as i64 + 1;
        let lo = ((z - depth_min - res.height) / res.stride).floor() as i64 - 1;
        for t in lo.max(0)..=hi.min(count as i64 - 1) {
            let s = start(t as usize);
            if s <= z && z < s + res.height {
                groups[t as usize].push(i);
            }
        }
    }
    let centroids = (0..count).map(|t| [0.0, 0.0, start(t) + 0.5 * res.height]).collect();
    Ok(FrustumSequence {
        frame,
        stride: res.stride,
        height: res.height,
        depth_min,
        depth_max,
        points: local_points,
        groups,
        centroids,
    })
}

/// Transforms rectified-camera points into `frame` and groups them into slabs.
pub fn build_sequence(
    points: &[Vec3],
    frame: &FrustumFrame,
    res: Resolution,
    depth_min: f64,
    depth_max: f64,
) -> Result<FrustumSequence> {
    let local = points.iter().map(|&p| frame.to_local(p)).collect();
    build_sequence_local(local, *frame, res, depth_min, depth_max)
}

/// Checks that each resolution doubles the previous one in both stride and height.
pub fn validate_resolutions(resolutions: &[Resolution]) -> Result<()> {
    if resolutions.is_empty() {
        return Err(Error::Config("at least one slab resolution is required".into()));
    }
    for w in resolutions.windows(2) {
        let (a, b) = (w[0], w[1]);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
        if !close(b.stride, 2.0 * a.stride) || !close(b.height, 2.0 * a.height) {
            return Err(Error::Config(format!(
                "resolutions must double: (s={}, u={}) followed by (s={}, u={})",
                a.stride, a.height, b.stride, b.height
            )));
        }
    }
    Ok(())
}

/// One sequence per resolution, all sharing `frame`; level `r` has
/// `L_0 / 2^r` slabs.
pub fn multi_resolution_sequences_local(
    local_points: &[Vec3],
    frame: &FrustumFrame,
    resolutions: &[Resolution],
    depth_min: f64,
    depth_max: f64,
) -> Result<Vec<FrustumSequence>> {
    validate_resolutions(resolutions)?;
    let base = slab_count(depth_min, depth_max, resolutions[0].stride);
    let mut out = Vec::with_capacity(resolutions.len());
    for (r, &res) in resolutions.iter().enumerate() {
        let seq = build_sequence_local(local_points.to_vec(), *frame, res, depth_min, depth_max)?;
        if seq.len() << r != base {
            return Err(Error::Config(format!(
                "resolution {r} yields {} slabs, expected {base} / 2^{r}",
                seq.len()
            )));
        }
        out.push(seq);
    }
    Ok(out)
}

pub fn multi_resolution_sequences(
    points: &[Vec3],
    frame: &FrustumFrame,
    resolutions: &[Resolution],
    depth_min: f64,
    depth_max: f64,
) -> Result<Vec<FrustumSequence>> {
    let local: Vec<Vec3> = points.iter().map(|&p| frame.to_local(p)).collect();
    multi_resolution_sequences_local(&local, frame, resolutions, depth_min, depth_max)
}
