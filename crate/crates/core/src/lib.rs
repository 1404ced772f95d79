//! Amodal 3D object detection from 2D region proposals and point clouds.
//!
//! A region proposal defines a frustum; sliding a pair of parallel planes
//! along the frustum axis groups the points into a sequence of slabs. A
//! shared PointNet turns every slab into a feature vector, the vectors are
//! arrayed into a feature map, and a 1D fully convolutional network with a
//! two-branch header predicts per-slab class probabilities and oriented box
//! offsets relative to anchors placed at the slab centroids.
//!
//! Module map:
//!
//! * [`io_data`] KITTI-format files, proposals, sampling, augmentation and
//!   the synthetic scene generator.
//! * [`geometry`] frustum frames and slab sequences.
//! * [`boxes`] oriented boxes, the offset codec, IoU, NMS and anchors.
//! * [`tensor`] a small dense tensor with reverse-mode differentiation.
//! * [`net`] PointNet streams, the FCN and the detection header.
//! * [`losses`] target assignment, focal, regression and corner losses.
//! * [`pipeline`] training, inference and refinement.
//! * [`eval`] KITTI-style average precision.
//! * [`cli`] the `fconv` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod boxes;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io_data;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
