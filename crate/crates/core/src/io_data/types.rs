use crate::boxes::OrientedBox3D;
use crate::geometry::linalg::{self, Mat3, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFrame {
    Sensor,
    CameraRect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub intensities: Option<Vec<f64>>,
    pub frame: PointFrame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, intensities: Option<Vec<f64>>, frame: PointFrame) -> Result<Self> {
        if let Some(i) = &intensities {
            if i.len() != points.len() {
                return Err(Error::Invalid(format!(
                    "{} intensities for {} points",
                    i.len(),
                    points.len()
                )));
            }
        }
        if let Some(bad) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid(format!("point {bad} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            points,
            intensities,
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rectified-camera projection plus the sensor-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalib {
    /// 3x4 rectified projection (`P2`).
    pub projection: [[f64; 4]; 3],
    /// `R0_rect`.
    pub rect_rotation: Mat3,
    /// 3x4 rigid `Tr_velo_to_cam`.
    pub sensor_to_camera: [[f64; 4]; 3],
    /// Other entries of the calibration file, kept for lossless rewriting.
    pub extra: Vec<(String, Vec<f64>)>,
}

impl CameraCalib {
    pub fn new(projection: [[f64; 4]; 3], rect_rotation: Mat3, sensor_to_camera: [[f64; 4]; 3]) -> Result<Self> {
        let calib = CameraCalib {
            projection,
            rect_rotation,
            sensor_to_camera,
            extra: Vec::new(),
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn sensor_rotation(&self) -> Mat3 {
        let m = &self.sensor_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn sensor_translation(&self) -> Vec3 {
        let m = &self.sensor_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn validate(&self) -> Result<()> {
        let e = linalg::orthonormality_error(&self.rect_rotation);
        if e > 1e-6 {
            return Err(Error::Invalid(format!(
                "rect rotation is not orthonormal (error {e:e})"
            )));
        }
        let e = linalg::orthonormality_error(&self.sensor_rotation());
        if e > 1e-6 {
            return Err(Error::Invalid(format!(
                "sensor rotation is not orthonormal (error {e:e})"
            )));
        }
        Ok(())
    }

    /// Pinhole calibration with identity rectification and the usual
    /// LiDAR axes (x forward, y left, z up) mounted at the camera center.
    pub fn pinhole(focal: f64, cx: f64, cy: f64) -> Self {
        CameraCalib {
            projection: [[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
            rect_rotation: linalg::IDENTITY,
            sensor_to_camera: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal2D {
    /// `(u_min, v_min, u_max, v_max)` in pixels.
    pub image_box: [f64; 4],
    pub category: String,
    pub score_2d: f64,
}

impl RegionProposal2D {
    pub fn new(image_box: [f64; 4], category: impl Into<String>, score_2d: f64) -> Result<Self> {
        let [u0, v0, u1, v1] = image_box;
        if !(u0 < u1 && v0 < v1) {
            return Err(Error::Invalid(format!("degenerate proposal box {image_box:?}")));
        }
        if !score_2d.is_finite() {
            return Err(Error::Invalid("non-finite proposal score".into()));
        }
        Ok(RegionProposal2D {
            image_box,
            category: category.into(),
            score_2d,
        })
    }

    pub fn width(&self) -> f64 {
        self.image_box[2] - self.image_box[0]
    }

    pub fn height(&self) -> f64 {
        self.image_box[3] - self.image_box[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.image_box[0] + self.image_box[2]),
            0.5 * (self.image_box[1] + self.image_box[3]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignore,
}

impl Difficulty {
    pub const LEVELS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Ignore => "ignore",
        }
    }
}

/// One line of a KITTI label file.
///
/// The raw KITTI fields are kept so a parsed file can be rewritten verbatim;
/// [`Label::bbox`] is the box in volumetric-center convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub category: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox_2d: [f64; 4],
    /// KITTI `h w l`.
    pub dimensions: [f64; 3],
    /// KITTI bottom-face center.
    pub location: Vec3,
    pub rotation_y: f64,
    pub score: Option<f64>,
    pub difficulty: Difficulty,
    pub bbox: Option<OrientedBox3D>,
}

impl Label {
    /// Builds a label from a volumetric-center box.
    pub fn from_box(category: &str, b: &OrientedBox3D, bbox_2d: [f64; 4], truncation: f64, occlusion: i32) -> Self {
        let [l, w, h] = b.sizes;
        let location = [b.center[0], b.center[1] + 0.5 * h, b.center[2]];
        let alpha = crate::boxes::wrap_angle(b.yaw - location[0].atan2(location[2]));
        let difficulty = super::kitti::difficulty_for(category, bbox_2d[3] - bbox_2d[1], occlusion, truncation);
        Label {
            category: category.to_string(),
            truncation,
            occlusion,
            alpha,
            bbox_2d,
            dimensions: [h, w, l],
            location,
            rotation_y: b.yaw,
            score: None,
            difficulty,
            bbox: Some(*b),
        }
    }
}

/// A scene: points, calibration, proposals and (for labeled splits) boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub frame_id: String,
    pub cloud: PointCloud,
    pub calib: CameraCalib,
    pub proposals: Vec<RegionProposal2D>,
    pub labels: Option<Vec<Label>>,
}

impl SceneSample {
    /// Scene points in the rectified camera frame.
    pub fn rect_points(&self) -> Vec<Vec3> {
        match self.cloud.frame {
            PointFrame::CameraRect => self.cloud.points.clone(),
            PointFrame::Sensor => super::sampling::sensor_to_rect(&self.cloud, &self.calib).points,
        }
    }
}
