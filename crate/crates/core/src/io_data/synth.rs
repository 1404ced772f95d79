//! Synthetic labeled scenes with exact ground truth.
//!
//! Boxes stand on a flat ground plane below the camera. Each box contributes
//! points sampled on its camera-facing faces with Gaussian noise; uniform
//! clutter and ground points fill the rest of the view. Proposals are the
//! exact image bounds of the projected box corners.

use super::sampling::project;
use super::types::{CameraCalib, Label, PointCloud, PointFrame, RegionProposal2D, SceneSample};
use crate::boxes::{iou_bev, OrientedBox3D};
use crate::geometry::linalg::{self, Vec3};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTemplate {
    pub name: String,
    /// Mean `(l, w, h)`.
    pub mean_size: Vec3,
    /// Each size is drawn uniformly within `±size_jitter` of the mean (relative).
    pub size_jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub templates: Vec<CategoryTemplate>,
    pub boxes_per_scene: usize,
    /// Range of box-center depths.
    pub depth_range: (f64, f64),
    pub points_per_box: usize,
    pub clutter_points: usize,
    pub ground_points: usize,
    pub noise_sigma: f64,
    pub image_size: (f64, f64),
    pub focal: f64,
    /// Camera height above the ground plane.
    pub camera_height: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            templates: vec![CategoryTemplate {
                name: "Car".into(),
                mean_size: [3.9, 1.6, 1.56],
                size_jitter: 0.05,
            }],
            boxes_per_scene: 1,
            depth_range: (8.0, 30.0),
            points_per_box: 300,
            clutter_points: 1500,
            ground_points: 1500,
            noise_sigma: 0.02,
            image_size: (1242.0, 375.0),
            focal: 721.5,
            camera_height: 1.65,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn calib(&self) -> CameraCalib {
        CameraCalib::pinhole(self.focal, 0.5 * self.image_size.0, 0.5 * self.image_size.1)
    }
}

fn image_bounds(calib: &CameraCalib, b: &OrientedBox3D) -> Option<[f64; 4]> {
    let mut out = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        let (uv, w) = project(calib, c);
        if w <= 0.5 {
            return None;
        }
        out[0] = out[0].min(uv[0]);
        out[1] = out[1].min(uv[1]);
        out[2] = out[2].max(uv[0]);
        out[3] = out[3].max(uv[1]);
    }
    Some(out)
}

/// The faces of `b` seen from the camera at the origin: `(center, u_axis,
/// v_axis)` with half-extent vectors spanning the face, weighted by projected area.
fn visible_faces(b: &OrientedBox3D) -> Vec<(Vec3, Vec3, Vec3, f64)> {
    let r = linalg::rot_y(b.yaw);
    let ax = linalg::mat_vec(&r, [1.0, 0.0, 0.0]);
    let ay = [0.0, 1.0, 0.0];
    let az = linalg::mat_vec(&r, [0.0, 0.0, 1.0]);
    let [l, w, h] = b.sizes;
    let (hl, hw, hh) = (0.5 * l, 0.5 * w, 0.5 * h);
    let faces = [
        (ax, hl, linalg::scale(az, hw), linalg::scale(ay, hh)),
        (
            linalg::scale(ax, -1.0),
            hl,
            linalg::scale(az, hw),
            linalg::scale(ay, hh),
        ),
        (az, hw, linalg::scale(ax, hl), linalg::scale(ay, hh)),
        (
            linalg::scale(az, -1.0),
            hw,
            linalg::scale(ax, hl),
            linalg::scale(ay, hh),
        ),
        (
            linalg::scale(ay, -1.0),
            hh,
            linalg::scale(ax, hl),
            linalg::scale(az, hw),
        ),
        (ay, hh, linalg::scale(ax, hl), linalg::scale(az, hw)),
    ];
    faces
        .iter()
        .filter_map(|&(n, d, u, v)| {
            let center = linalg::add(b.center, linalg::scale(n, d));
            let to_cam = linalg::normalize(linalg::scale(center, -1.0));
            let facing = linalg::dot(n, to_cam);
            (facing > 1e-3).then(|| (center, u, v, 4.0 * linalg::norm(u) * linalg::norm(v) * facing))
        })
        .collect()
}

/// Generates one labeled scene with points in the rectified camera frame.
pub fn make_synthetic_scene<R: Rng + ?Sized>(cfg: &SynthConfig, frame_id: &str, rng: &mut R) -> Result<SceneSample> {
    if cfg.templates.is_empty() && cfg.boxes_per_scene > 0 {
        return Err(Error::Generation("no category templates".into()));
    }
    let calib = cfg.calib();
    let (img_w, img_h) = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let half_fov = (0.5 * img_w / cfg.focal).atan();

    let mut placed: Vec<(usize, OrientedBox3D, [f64; 4])> = Vec::new();
    let mut attempts = 0;
    while placed.len() < cfg.boxes_per_scene {
        attempts += 1;
        if attempts > cfg.max_retries * cfg.boxes_per_scene.max(1) {
            return Err(Error::Generation(format!(
                "placed {} of {} boxes after {} attempts",
                placed.len(),
                cfg.boxes_per_scene,
                attempts - 1
            )));
        }
        let k = rng.random_range(0..cfg.templates.len());
        let t = &cfg.templates[k];
        let sizes: Vec3 =
            std::array::from_fn(|i| t.mean_size[i] * (1.0 + rng.random_range(-t.size_jitter..=t.size_jitter)));
        let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
        let x = z * (0.75 * half_fov).tan() * rng.random_range(-1.0..=1.0);
        let yaw = rng.random_range(-PI..PI);
        let b = OrientedBox3D::new_unchecked([x, cfg.camera_height - 0.5 * sizes[2], z], sizes, yaw);
        let Some(bounds) = image_bounds(&calib, &b) else {
            continue;
        };
        if bounds[0] < 0.0 || bounds[1] < 0.0 || bounds[2] > img_w || bounds[3] > img_h {
            continue;
        }
        let padded = b.scaled(1.2);
        if placed.iter().any(|(_, o, _)| iou_bev(&padded, &o.scaled(1.2)) > 0.0) {
            continue;
        }
        placed.push((k, b, bounds));
    }

    let mut points = Vec::new();
    for (_, b, _) in &placed {
        let faces = visible_faces(b);
        let total: f64 = faces.iter().map(|f| f.3).sum();
        let mut cumulative = 0.0;
        let mut emitted = 0usize;
        for &(c, u, v, weight) in &faces {
            cumulative += weight;
            let upto = (cfg.points_per_box as f64 * cumulative / total).round() as usize;
            let share = upto - emitted;
            emitted = upto;
            for _ in 0..share {
                let a = rng.random_range(-1.0..=1.0);
                let bb = rng.random_range(-1.0..=1.0);
                let p = linalg::add(c, linalg::add(linalg::scale(u, a), linalg::scale(v, bb)));
                points.push([
                    p[0] + noise.sample(rng),
                    p[1] + noise.sample(rng),
                    p[2] + noise.sample(rng),
                ]);
            }
        }
    }
    let far = cfg.depth_range.1 + 10.0;
    let inside_any = |p: &Vec3| placed.iter().any(|(_, b, _)| b.scaled(1.1).contains(*p));
    let mut clutter = 0;
    while clutter < cfg.clutter_points {
        let z = rng.random_range(1.0..far);
        let x = z * half_fov.tan() * rng.random_range(-1.0..=1.0);
        let y = rng.random_range(-2.0..cfg.camera_height);
        let p = [x, y, z];
        if !inside_any(&p) {
            points.push(p);
            clutter += 1;
        }
    }
    let mut ground = 0;
    while ground < cfg.ground_points {
        let z = rng.random_range(2.0..far);
        let x = z * half_fov.tan() * rng.random_range(-1.0..=1.0);
        let p = [x, cfg.camera_height + noise.sample(rng), z];
        if !inside_any(&p) {
            points.push(p);
            ground += 1;
        }
    }

    let mut proposals = Vec::new();
    let mut labels = Vec::new();
    for (k, b, bounds) in &placed {
        let name = &cfg.templates[*k].name;
        proposals.push(RegionProposal2D::new(
            *bounds,
            name.clone(),
            rng.random_range(0.5..1.0),
        )?);
        labels.push(Label::from_box(name, b, *bounds, 0.0, 0));
    }
    Ok(SceneSample {
        frame_id: frame_id.to_string(),
        cloud: PointCloud::new(points, None, PointFrame::CameraRect)?,
        calib,
        proposals,
        labels: Some(labels),
    })
}
