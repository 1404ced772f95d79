//! Scene data: KITTI-format files, 2D proposals, point sampling,
//! augmentation and the synthetic scene generator.

mod augment;
mod dataset;
mod kitti;
mod proposals;
mod sampling;
mod synth;
mod types;

pub use augment::{
    augment_points, augment_proposal, flip_box, flip_points, shift_box, shift_points, AugmentConfig, PointAugment,
};
pub use dataset::{list_frames, read_scene, write_scene, DatasetPaths};
pub use kitti::{
    difficulty_for, format_calib, format_labels, load_kitti_calib, load_kitti_cloud, load_kitti_labels, parse_calib,
    parse_cloud, parse_labels, write_kitti_cloud, KNOWN_CATEGORIES,
};
pub use proposals::{format_proposals, load_proposals, parse_proposals};
pub use sampling::{points_in_proposal, project, sample_fixed, sensor_to_rect};
pub use synth::{make_synthetic_scene, CategoryTemplate, SynthConfig};
pub use types::{CameraCalib, Difficulty, Label, PointCloud, PointFrame, RegionProposal2D, SceneSample};
