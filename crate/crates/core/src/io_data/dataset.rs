//! On-disk scene layout, KITTI style:
//!
//! ```text
//! <root>/velodyne/<frame>.bin
//! <root>/calib/<frame>.txt
//! <root>/label_2/<frame>.txt      (labeled splits only)
//! <root>/proposals.txt
//! ```

use super::kitti::{
    format_calib, format_labels, load_kitti_calib, load_kitti_cloud, load_kitti_labels, write_kitti_cloud,
};
use super::proposals::{format_proposals, load_proposals};
use super::types::{PointCloud, PointFrame, RegionProposal2D, SceneSample};
use crate::geometry::linalg;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths { root: root.into() }
    }

    pub fn cloud(&self, frame: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{frame}.bin"))
    }

    pub fn calib(&self, frame: &str) -> PathBuf {
        self.root.join("calib").join(format!("{frame}.txt"))
    }

    pub fn labels(&self, frame: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{frame}.txt"))
    }

    pub fn proposals(&self) -> PathBuf {
        self.root.join("proposals.txt")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Writes scenes and a combined proposal file. Points are stored in the
/// sensor frame.
pub fn write_scene(paths: &DatasetPaths, scenes: &[SceneSample]) -> Result<()> {
    for sub in ["velodyne", "calib", "label_2"] {
        mkdir(&paths.root.join(sub))?;
    }
    for s in scenes {
        let sensor = match s.cloud.frame {
            PointFrame::Sensor => s.cloud.clone(),
            PointFrame::CameraRect => {
                let rot_t = linalg::transpose(&s.calib.sensor_rotation());
                let r0_t = linalg::transpose(&s.calib.rect_rotation);
                let t = s.calib.sensor_translation();
                let points = s
                    .cloud
                    .points
                    .iter()
                    .map(|&p| linalg::mat_vec(&rot_t, linalg::sub(linalg::mat_vec(&r0_t, p), t)))
                    .collect();
                PointCloud {
                    points,
                    intensities: s.cloud.intensities.clone(),
                    frame: PointFrame::Sensor,
                }
            }
        };
        write_kitti_cloud(paths.cloud(&s.frame_id), &sensor)?;
        write(&paths.calib(&s.frame_id), &format_calib(&s.calib))?;
        if let Some(labels) = &s.labels {
            write(&paths.labels(&s.frame_id), &format_labels(labels))?;
        }
    }
    let props = format_proposals(
        scenes
            .iter()
            .flat_map(|s| s.proposals.iter().map(move |p| (s.frame_id.as_str(), p))),
    );
    write(&paths.proposals(), &props)
}

/// Frame ids present under `velodyne/`, sorted.
pub fn list_frames(paths: &DatasetPaths) -> Result<Vec<String>> {
    let dir = paths.root.join("velodyne");
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".bin") {
            out.push(stem.to_string());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every frame of a dataset directory. Labels are attached when the
/// label file exists; proposals come from `proposals_file` or the default
/// `proposals.txt` when present.
pub fn read_scene(paths: &DatasetPaths, proposals_file: Option<&Path>) -> Result<Vec<SceneSample>> {
    let default = paths.proposals();
    let prop_path = proposals_file.map(Path::to_path_buf).unwrap_or(default);
    let mut by_frame: BTreeMap<String, Vec<RegionProposal2D>> = BTreeMap::new();
    if prop_path.exists() {
        for (f, p) in load_proposals(&prop_path)? {
            by_frame.entry(f).or_default().push(p);
        }
    } else if proposals_file.is_some() {
        return Err(Error::io(
            &prop_path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let mut scenes = Vec::new();
    for frame in list_frames(paths)? {
        let label_path = paths.labels(&frame);
        let labels = if label_path.exists() {
            Some(load_kitti_labels(&label_path)?)
        } else {
            None
        };
        scenes.push(SceneSample {
            cloud: load_kitti_cloud(paths.cloud(&frame))?,
            calib: load_kitti_calib(paths.calib(&frame))?,
            proposals: by_frame.remove(&frame).unwrap_or_default(),
            labels,
            frame_id: frame,
        });
    }
    Ok(scenes)
}
