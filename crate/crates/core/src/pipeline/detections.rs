use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::OrientedBox3D;
use crate::geometry::linalg::Vec3;
use crate::{Error, Result};

/// One detected object in the rectified camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub frame_id: String,
    pub category: String,
    pub bbox: OrientedBox3D,
    pub score_3d: f64,
    pub score_2d: f64,
    /// `score_2d + score_3d`.
    pub score_fused: f64,
    /// Index of the emitting proposal within its scene, when known.
    pub proposal: Option<usize>,
}

impl DetectionResult {
    pub fn new(
        frame_id: &str,
        category: &str,
        bbox: OrientedBox3D,
        score_3d: f64,
        score_2d: f64,
        proposal: Option<usize>,
    ) -> Self {
        DetectionResult {
            frame_id: frame_id.to_string(),
            category: category.to_string(),
            bbox,
            score_3d,
            score_2d,
            score_fused: score_2d + score_3d,
            proposal,
        }
    }
}

/// One line per detection:
/// `frame_id category x y z l w h yaw score_3d score_2d score_fused`.
pub fn format_detections(dets: &[DetectionResult]) -> String {
    let mut out = String::new();
    for d in dets {
        let [x, y, z] = d.bbox.center;
        let [l, w, h] = d.bbox.sizes;
        let _ = writeln!(
            out,
            "{} {} {x} {y} {z} {l} {w} {h} {} {} {} {}",
            d.frame_id, d.category, d.bbox.yaw, d.score_3d, d.score_2d, d.score_fused
        );
    }
    out
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionResult>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 12 {
            return Err(Error::malformed(
                path,
                Some(n + 1),
                format!("expected 12 fields, found {}", f.len()),
            ));
        }
        let mut v = [0.0; 10];
        for (k, s) in f[2..].iter().enumerate() {
            v[k] = s
                .parse()
                .map_err(|_| Error::malformed(path, Some(n + 1), format!("bad number {s:?}")))?;
        }
        let bbox = OrientedBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
            .map_err(|e| Error::malformed(path, Some(n + 1), e.to_string()))?;
        out.push(DetectionResult {
            frame_id: f[0].to_string(),
            category: f[1].to_string(),
            bbox,
            score_3d: v[7],
            score_2d: v[8],
            score_fused: v[9],
            proposal: None,
        });
    }
    Ok(out)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[DetectionResult]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

/// Wavefront OBJ with the points as vertices followed by every box as 8
/// vertices joined by 12 line elements.
pub fn export_obj(points: &[Vec3], boxes: &[OrientedBox3D]) -> String {
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "v {} {} {}", p[0], p[1], p[2]);
    }
    for (i, b) in boxes.iter().enumerate() {
        let base = points.len() + 8 * i + 1;
        let _ = writeln!(out, "o box{i}");
        for c in b.corners() {
            let _ = writeln!(out, "v {} {} {}", c[0], c[1], c[2]);
        }
        for (a, e) in EDGES {
            let _ = writeln!(out, "l {} {}", base + a, base + e);
        }
    }
    out
}
