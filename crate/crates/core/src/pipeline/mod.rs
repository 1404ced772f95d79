//! Training, inference, refinement and detection files.
//!
//! Inference runs the first-stage network on every proposal's frustum,
//! keeps foreground positions, decodes their anchors, pools the boxes of a
//! scene and applies per-category rotated NMS; the 3D score is the category
//! probability and the fused score adds the proposal's 2D score. Refinement
//! crops the points inside each detection's expanded box, re-expresses them
//! in a frame whose axis is the box's length axis and runs a second network
//! along that axis.

mod detections;
mod infer;
mod samples;
mod train;

pub use detections::{
    export_obj, format_detections, parse_detections, read_detections, write_detections, DetectionResult,
};
pub use infer::{
    decode_candidates, infer_scene, parallel_map, refine_detections, refine_scene, refined_box, suppress, Candidate,
};
pub use samples::{
    box_key, frustum_sample, jitter_box, keyed_rng, proposal_key, refinement_frame, refinement_resolutions,
    refinement_sample, FrustumSample, PreparedScene, MIN_REFINE_POINTS,
};
pub use train::{train_first_stage, train_network, train_refinement, train_step, TrainReport};
