use std::f64::consts::PI;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{build_anchors, AnchorSet, OrientedBox3D};
use crate::config::Config;
use crate::geometry::linalg::Vec3;
use crate::geometry::{frustum_frame, multi_resolution_sequences_local, FrustumFrame, Resolution};
use crate::io_data::{
    augment_points, augment_proposal, points_in_proposal, sample_fixed, CameraCalib, RegionProposal2D, SceneSample,
};
use crate::losses::{assign_targets, SampleTargets};
use crate::net::SampleInput;
use crate::Result;

/// A scene with points in the rectified camera frame and ground truths
/// reduced to `(box, category index)` for the configured categories.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub frame_id: String,
    pub points: Vec<Vec3>,
    pub intensities: Option<Vec<f64>>,
    pub calib: CameraCalib,
    pub proposals: Vec<RegionProposal2D>,
    pub gts: Vec<(OrientedBox3D, usize)>,
    pub labeled: bool,
}

impl PreparedScene {
    pub fn new(scene: &SceneSample, cfg: &Config) -> Self {
        let gts = scene
            .labels
            .iter()
            .flatten()
            .filter_map(|l| Some((l.bbox?, cfg.category_index(&l.category)?)))
            .collect();
        PreparedScene {
            frame_id: scene.frame_id.clone(),
            points: scene.rect_points(),
            intensities: scene.cloud.intensities.clone(),
            calib: scene.calib.clone(),
            proposals: scene.proposals.clone(),
            gts,
            labeled: scene.labels.is_some(),
        }
    }

    fn gather_intensities(&self, cfg: &Config, sel: &[usize]) -> Option<Vec<f64>> {
        cfg.use_intensity.then(|| match &self.intensities {
            Some(v) => sel.iter().map(|&i| v[i]).collect(),
            None => vec![0.0; sel.len()],
        })
    }
}

/// Generator whose stream is derived from `key`, so that work items keyed by
/// their content draw the same numbers in any processing order.
pub fn keyed_rng<K: Hash>(seed: u64, key: K) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h.finish());
    rng
}

/// Hashable identity of a box.
pub fn box_key(b: &OrientedBox3D) -> [u64; 7] {
    let [x, y, z] = b.center;
    let [l, w, h] = b.sizes;
    [x, y, z, l, w, h, b.yaw].map(f64::to_bits)
}

/// Hashable identity of a proposal.
pub fn proposal_key(p: &RegionProposal2D) -> ([u64; 4], &str) {
    (p.image_box.map(f64::to_bits), &p.category)
}

/// Network input for one proposal, in its frustum frame.
pub struct FrustumSample {
    pub input: SampleInput,
    pub anchors: AnchorSet,
    pub frame: FrustumFrame,
    /// Ground truths in `frame` after augmentation.
    pub gts: Vec<(OrientedBox3D, usize)>,
    pub point_count: usize,
}

/// Builds the frustum sample of `proposal`; with `augment` the proposal and
/// the frustum points are jittered as configured.
pub fn frustum_sample<R: Rng + ?Sized>(
    scene: &PreparedScene,
    proposal: &RegionProposal2D,
    cfg: &Config,
    augment: bool,
    rng: &mut R,
) -> Result<FrustumSample> {
    let aug = cfg.augment_config();
    let prop = if augment {
        augment_proposal(proposal, rng, &aug)
    } else {
        proposal.clone()
    };
    let frame = frustum_frame(&prop, &scene.calib)?;
    let idx = points_in_proposal(&scene.points, &scene.calib, &prop);
    let sel = sample_fixed(&idx, cfg.num_points, rng);
    let mut local: Vec<Vec3> = sel.iter().map(|&i| frame.to_local(scene.points[i])).collect();
    let mut boxes: Vec<OrientedBox3D> = scene.gts.iter().map(|(b, _)| frame.box_to_local(b)).collect();
    if augment {
        augment_points(&mut local, &mut boxes, rng, &aug);
    }
    let seqs = multi_resolution_sequences_local(&local, &frame, &cfg.resolutions(), cfg.depth_min, cfg.depth_max)?;
    let ints = scene.gather_intensities(cfg, &sel);
    let input = SampleInput::from_sequences(&seqs, ints.as_deref());
    let anchors = build_anchors(&seqs[0], cfg.header_len(), &cfg.mean_sizes, cfg.yaw_bins)?;
    Ok(FrustumSample {
        input,
        anchors,
        frame,
        gts: boxes.into_iter().zip(scene.gts.iter().map(|g| g.1)).collect(),
        point_count: sel.len(),
    })
}

impl FrustumSample {
    pub fn targets(&self, shrink_ratio: f64) -> SampleTargets {
        SampleTargets {
            assignment: assign_targets(&self.anchors, &self.gts, shrink_ratio),
            anchors: self.anchors.clone(),
        }
    }
}

/// Frame centered on `b` whose `+z` axis is the box's length axis.
pub fn refinement_frame(b: &OrientedBox3D) -> FrustumFrame {
    FrustumFrame::from_yaw(b.center, -PI / 2.0 - b.yaw)
}

/// Slab resolutions of the refinement network for a box of length `length`:
/// the expanded length is split into `refine_slabs` strides.
pub fn refinement_resolutions(cfg: &Config, length: f64) -> (Vec<Resolution>, f64) {
    let half = 0.5 * cfg.refine_expand * length;
    let s0 = 2.0 * half / cfg.refine_slabs as f64;
    let res = (0..cfg.strides.len())
        .map(|r| {
            let s = s0 * (1u64 << r) as f64;
            Resolution::new(s, 2.0 * s)
        })
        .collect();
    (res, half)
}

/// Minimum number of scene points inside the expanded box for refinement.
pub const MIN_REFINE_POINTS: usize = 5;

/// Network input for refining `b`, or `None` when the expanded box holds
/// fewer than [`MIN_REFINE_POINTS`] points.
pub fn refinement_sample<R: Rng + ?Sized>(
    scene: &PreparedScene,
    b: &OrientedBox3D,
    cfg: &Config,
    rng: &mut R,
) -> Result<Option<FrustumSample>> {
    let expanded = b.scaled(cfg.refine_expand);
    let idx: Vec<usize> = scene
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| expanded.contains(**p))
        .map(|(i, _)| i)
        .collect();
    if idx.len() < MIN_REFINE_POINTS {
        return Ok(None);
    }
    let sel = sample_fixed(&idx, cfg.refine_points, rng);
    let frame = refinement_frame(b);
    let local: Vec<Vec3> = sel.iter().map(|&i| frame.to_local(scene.points[i])).collect();
    let (res, half) = refinement_resolutions(cfg, b.length());
    let seqs = multi_resolution_sequences_local(&local, &frame, &res, -half, half)?;
    let ints = scene.gather_intensities(cfg, &sel);
    let input = SampleInput::from_sequences(&seqs, ints.as_deref());
    let local_box = frame.box_to_local(b);
    let anchors = AnchorSet {
        centers: seqs[0].header_centroids(cfg.refine_slabs / 2)?,
        sizes: vec![b.sizes; cfg.categories.len()],
        yaws: vec![local_box.yaw],
    };
    Ok(Some(FrustumSample {
        input,
        anchors,
        frame,
        gts: scene.gts.iter().map(|(g, k)| (frame.box_to_local(g), *k)).collect(),
        point_count: sel.len(),
    }))
}

/// Ground truth perturbed by up to `frac` of its size in center and size and
/// `frac * pi/2` in heading; the input boxes the refinement stage trains on.
pub fn jitter_box<R: Rng + ?Sized>(b: &OrientedBox3D, frac: f64, rng: &mut R) -> OrientedBox3D {
    if frac == 0.0 {
        return *b;
    }
    let mut u = || rng.random_range(-frac..=frac);
    let [l, w, h] = b.sizes;
    let center = [b.center[0] + u() * l, b.center[1] + u() * h, b.center[2] + u() * l];
    let sizes = [l * (1.0 + u()), w * (1.0 + u()), h * (1.0 + u())];
    let yaw = b.yaw + u() * PI / 2.0;
    OrientedBox3D::new_unchecked(center, sizes, yaw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::linalg;

    #[test]
    fn refinement_frame_roundtrip_and_axis() {
        let b = OrientedBox3D::new([3.0, 1.0, 12.0], [4.0, 1.7, 1.5], 0.7).unwrap();
        let f = refinement_frame(&b);
        let local = f.box_to_local(&b);
        assert!(linalg::norm(local.center) < 1e-12);
        assert!((local.yaw + PI / 2.0).abs() < 1e-12);
        let axis = linalg::mat_vec(&f.rotation, b.length_axis());
        assert!(linalg::norm(linalg::sub(axis, [0.0, 0.0, 1.0])) < 1e-12);
        let p = [2.5, 0.3, 11.0];
        let back = f.to_world(f.to_local(p));
        assert!(linalg::norm(linalg::sub(back, p)) < 1e-9);
    }

    #[test]
    fn refinement_has_a_header_position_at_the_box_center() {
        let cfg = Config::preset("desk").unwrap();
        let (res, half) = refinement_resolutions(&cfg, 3.9);
        let seq =
            crate::geometry::build_sequence_local(Vec::new(), FrustumFrame::identity(), res[0], -half, half).unwrap();
        assert_eq!(seq.len(), cfg.refine_slabs);
        let c = seq.header_centroids(cfg.refine_slabs / 2).unwrap();
        assert!(c.iter().any(|p| p[2].abs() < 1e-12), "{c:?}");
    }
}
