use super::types::{CameraCalib, PointCloud, PointFrame, RegionProposal2D};
use crate::geometry::linalg::{self, Vec3};
use rand::Rng;

/// `rect_rotation * (sensor_to_camera * [p; 1])` for every point.
pub fn sensor_to_rect(cloud: &PointCloud, calib: &CameraCalib) -> PointCloud {
    let rot = calib.sensor_rotation();
    let t = calib.sensor_translation();
    let points = cloud
        .points
        .iter()
        .map(|&p| linalg::mat_vec(&calib.rect_rotation, linalg::add(linalg::mat_vec(&rot, p), t)))
        .collect();
    PointCloud {
        points,
        intensities: cloud.intensities.clone(),
        frame: PointFrame::CameraRect,
    }
}

/// Pixel coordinates and projective depth of a rectified-camera point.
pub fn project(calib: &CameraCalib, p: Vec3) -> ([f64; 2], f64) {
    let m = &calib.projection;
    let row = |r: usize| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
    let w = row(2);
    ([row(0) / w, row(1) / w], w)
}

/// Indices of points in front of the camera whose projection falls strictly
/// inside the proposal's image box, in input order.
///
/// Tests the four side planes of the viewing frustum (`(P_0 - u P_2)·X` etc.),
/// which is the division-free form of the projected-pixel test.
pub fn points_in_proposal(points: &[Vec3], calib: &CameraCalib, proposal: &RegionProposal2D) -> Vec<usize> {
    let m = &calib.projection;
    let [u0, v0, u1, v1] = proposal.image_box;
    let plane = |r: usize, s: f64| -> [f64; 4] { std::array::from_fn(|k| m[r][k] - s * m[2][k]) };
    let planes = [plane(0, u0), plane(1, v0), plane(0, u1), plane(1, v1)];
    let signs = [1.0, 1.0, -1.0, -1.0];
    let eval = |pl: &[f64; 4], p: &Vec3| pl[0] * p[0] + pl[1] * p[1] + pl[2] * p[2] + pl[3];
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p[2] > 0.0 && eval(&m[2], p) > 0.0 && planes.iter().zip(signs.iter()).all(|(pl, &s)| s * eval(pl, p) > 0.0)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Resamples an index list to exactly `n` entries.
///
/// The input is sorted first, so the result depends only on the multiset of
/// indices and the generator state. With at least `n` inputs the draw is
/// without replacement; with fewer, every input is kept once and the rest are
/// drawn with replacement; an empty input stays empty.
pub fn sample_fixed<R: Rng + ?Sized>(indices: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() || n == 0 {
        return Vec::new();
    }
    if sorted.len() >= n {
        rand::seq::index::sample(rng, sorted.len(), n)
            .into_iter()
            .map(|i| sorted[i])
            .collect()
    } else {
        let mut out = sorted.clone();
        while out.len() < n {
            out.push(sorted[rng.random_range(0..sorted.len())]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn calib() -> CameraCalib {
        CameraCalib::pinhole(700.0, 600.0, 180.0)
    }

    #[test]
    fn identity_and_translation() {
        let mut c = calib();
        c.sensor_to_camera = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]], None, PointFrame::Sensor).unwrap();
        assert_eq!(sensor_to_rect(&cloud, &c).points, cloud.points);
        c.sensor_to_camera[2][3] = 1.0;
        let moved = sensor_to_rect(&cloud, &c);
        assert_eq!(moved.points[0], [1.0, 2.0, 4.0]);
        assert_eq!(moved.points[1], [-4.0, 0.5, 10.0]);
        assert_eq!(moved.frame, PointFrame::CameraRect);
    }

    #[test]
    fn center_point_included_and_behind_excluded() {
        let c = calib();
        let prop = RegionProposal2D::new([590.0, 170.0, 610.0, 190.0], "Car", 0.9).unwrap();
        let pts = [[0.0, 0.0, 10.0], [0.0, 0.0, -5.0], [5.0, 0.0, 10.0]];
        assert_eq!(points_in_proposal(&pts, &c, &prop), vec![0]);
    }

    #[test]
    fn sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big: Vec<usize> = (0..2000).collect();
        let s = sample_fixed(&big, 1024, &mut rng);
        assert_eq!(s.len(), 1024);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 1024);

        let small: Vec<usize> = (100..110).collect();
        let s = sample_fixed(&small, 512, &mut rng);
        assert_eq!(s.len(), 512);
        assert!(s.iter().all(|i| small.contains(i)));

        assert!(sample_fixed(&[], 512, &mut rng).is_empty());
    }

    #[test]
    fn sampling_is_deterministic_and_order_free() {
        let idx: Vec<usize> = (0..300).map(|i| i * 7 % 1000).collect();
        let mut rev = idx.clone();
        rev.reverse();
        let a = sample_fixed(&idx, 128, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_fixed(&rev, 128, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
