//! KITTI object-detection file formats.

use super::types::{CameraCalib, Difficulty, Label, PointCloud, PointFrame};
use crate::boxes::OrientedBox3D;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Categories with KITTI difficulty rules; anything else is `Ignore`.
pub const KNOWN_CATEGORIES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

const RECORD_BYTES: usize = 16;

pub fn parse_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::malformed(
            path,
            None,
            format!("size {} is not a multiple of {RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]) as f64;
        let p = [f(0), f(1), f(2)];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::malformed(
                path,
                None,
                format!("point {i} has a non-finite coordinate"),
            ));
        }
        points.push(p);
        intensities.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensities: Some(intensities),
        frame: PointFrame::Sensor,
    })
}

/// Reads a flat little-endian `f32` `(x, y, z, reflectance)` point file.
pub fn load_kitti_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&bytes, path)
}

pub fn write_kitti_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let r = cloud.intensities.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], r] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_floats(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(path, Some(line), format!("not a number: {s:?}")))
        })
        .collect()
}

fn rows3x4(v: &[f64]) -> [[f64; 4]; 3] {
    let mut m = [[0.0; 4]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row.copy_from_slice(&v[4 * i..4 * i + 4]);
    }
    m
}

pub fn parse_calib(text: &str, path: &Path) -> Result<CameraCalib> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    let mut extra = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::malformed(path, Some(i + 1), "expected `key: values`"))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let values = parse_floats(path, i + 1, &fields)?;
        let want = |n: usize| -> Result<()> {
            if values.len() != n {
                return Err(Error::malformed(
                    path,
                    Some(i + 1),
                    format!("{key} needs {n} values, found {}", values.len()),
                ));
            }
            Ok(())
        };
        match key.trim() {
            "P2" => {
                want(12)?;
                p2 = Some(rows3x4(&values));
            }
            "R0_rect" | "R_rect" => {
                want(9)?;
                r0 = Some([
                    [values[0], values[1], values[2]],
                    [values[3], values[4], values[5]],
                    [values[6], values[7], values[8]],
                ]);
            }
            "Tr_velo_to_cam" | "Tr_velo_cam" => {
                want(12)?;
                tr = Some(rows3x4(&values));
            }
            other => extra.push((other.to_string(), values)),
        }
    }
    let missing = |k: &str| Error::malformed(path, None, format!("missing {k}"));
    let calib = CameraCalib {
        projection: p2.ok_or_else(|| missing("P2"))?,
        rect_rotation: r0.ok_or_else(|| missing("R0_rect"))?,
        sensor_to_camera: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
        extra,
    };
    calib
        .validate()
        .map_err(|e| Error::malformed(path, None, e.to_string()))?;
    Ok(calib)
}

pub fn load_kitti_calib(path: impl AsRef<Path>) -> Result<CameraCalib> {
    let path = path.as_ref();
    parse_calib(&read_text(path)?, path)
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn format_calib(calib: &CameraCalib) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "P2: {}", join(calib.projection.iter().flatten().copied()));
    let _ = writeln!(out, "R0_rect: {}", join(calib.rect_rotation.iter().flatten().copied()));
    let _ = writeln!(
        out,
        "Tr_velo_to_cam: {}",
        join(calib.sensor_to_camera.iter().flatten().copied())
    );
    for (k, v) in &calib.extra {
        let _ = writeln!(out, "{k}: {}", join(v.iter().copied()));
    }
    out
}

/// KITTI devkit difficulty from 2D box height, occlusion and truncation.
pub fn difficulty_for(category: &str, pixel_height: f64, occlusion: i32, truncation: f64) -> Difficulty {
    if !KNOWN_CATEGORIES.contains(&category) {
        return Difficulty::Ignore;
    }
    if pixel_height >= 40.0 && occlusion <= 0 && truncation <= 0.15 {
        Difficulty::Easy
    } else if pixel_height >= 25.0 && occlusion <= 1 && truncation <= 0.30 {
        Difficulty::Moderate
    } else if pixel_height >= 25.0 && occlusion <= 2 && truncation <= 0.50 {
        Difficulty::Hard
    } else {
        Difficulty::Ignore
    }
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 15 {
            return Err(Error::malformed(
                path,
                Some(i + 1),
                format!("label line has {} fields, expected at least 15", fields.len()),
            ));
        }
        let v = parse_floats(path, i + 1, &fields[1..fields.len().min(16)])?;
        let category = fields[0].to_string();
        let truncation = v[0];
        let occlusion = v[1] as i32;
        let bbox_2d = [v[3], v[4], v[5], v[6]];
        let dimensions = [v[7], v[8], v[9]];
        let location = [v[10], v[11], v[12]];
        let rotation_y = v[13];
        let [h, w, l] = dimensions;
        let bbox = OrientedBox3D::new([location[0], location[1] - 0.5 * h, location[2]], [l, w, h], rotation_y).ok();
        out.push(Label {
            difficulty: difficulty_for(&category, bbox_2d[3] - bbox_2d[1], occlusion, truncation),
            category,
            truncation,
            occlusion,
            alpha: v[2],
            bbox_2d,
            dimensions,
            location,
            rotation_y,
            score: v.get(14).copied(),
            bbox,
        });
    }
    Ok(out)
}

pub fn load_kitti_labels(path: impl AsRef<Path>) -> Result<Vec<Label>> {
    let path = path.as_ref();
    parse_labels(&read_text(path)?, path)
}

pub fn format_labels(labels: &[Label]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            l.category,
            l.truncation,
            l.occlusion,
            l.alpha,
            l.bbox_2d[0],
            l.bbox_2d[1],
            l.bbox_2d[2],
            l.bbox_2d[3],
            l.dimensions[0],
            l.dimensions[1],
            l.dimensions[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.rotation_y
        );
        if let Some(s) = l.score {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
    }
    out
}
