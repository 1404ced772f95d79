use super::OrientedBox3D;
use crate::geometry::linalg::Vec3;
use crate::geometry::FrustumSequence;
use crate::{Error, Result};
use std::f64::consts::PI;

/// Centers of `n` equal bins covering `[-π, π)`.
pub fn yaw_bin_centers(n: usize) -> Vec<f64> {
    let width = 2.0 * PI / n as f64;
    (0..n).map(|i| -PI + (i as f64 + 0.5) * width).collect()
}

/// Anchor boxes for every (position, category, yaw bin) triple.
///
/// Slots are laid out position-major, then category, then yaw bin, which is
/// the same order the regression branch uses for its channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub centers: Vec<Vec3>,
    /// Per-category `(l, w, h)`.
    pub sizes: Vec<Vec3>,
    pub yaws: Vec<f64>,
}

impl AnchorSet {
    pub fn positions(&self) -> usize {
        self.centers.len()
    }

    pub fn categories(&self) -> usize {
        self.sizes.len()
    }

    pub fn bins(&self) -> usize {
        self.yaws.len()
    }

    pub fn len(&self) -> usize {
        self.positions() * self.categories() * self.bins()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, position: usize, category: usize, bin: usize) -> usize {
        (position * self.categories() + category) * self.bins() + bin
    }

    pub fn anchor(&self, position: usize, category: usize, bin: usize) -> OrientedBox3D {
        OrientedBox3D::new_unchecked(self.centers[position], self.sizes[category], self.yaws[bin])
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), OrientedBox3D)> + '_ {
        (0..self.positions()).flat_map(move |t| {
            (0..self.categories()).flat_map(move |k| (0..self.bins()).map(move |n| ((t, k, n), self.anchor(t, k, n))))
        })
    }
}

/// Places anchors at the centroids of the `out_len` header positions.
///
/// The header works at a coarser resolution than the input sequence when
/// `out_len < seq.len()`; a header position then spans `seq.len() / out_len`
/// input strides and its centroid is that coarser slab's axis midpoint.
pub fn build_anchors(seq: &FrustumSequence, out_len: usize, mean_sizes: &[Vec3], n_bins: usize) -> Result<AnchorSet> {
    if n_bins == 0 {
        return Err(Error::Config("yaw bin count must be at least 1".into()));
    }
    if mean_sizes.iter().flatten().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!(
            "anchor sizes must be positive, got {mean_sizes:?}"
        )));
    }
    Ok(AnchorSet {
        centers: seq.header_centroids(out_len)?,
        sizes: mean_sizes.to_vec(),
        yaws: yaw_bin_centers(n_bins),
    })
}
