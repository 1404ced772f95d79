//! Exact rotated-box overlap by convex polygon clipping.

use super::OrientedBox3D;

const DEGENERATE_AREA: f64 = 1e-12;

type P2 = [f64; 2];

#[inline]
fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Bird's-eye footprint as `(x, z)` points with positive orientation.
pub fn bev_polygon(b: &OrientedBox3D) -> [P2; 4] {
    let c = b.corners();
    [
        [c[0][0], c[0][2]],
        [c[1][0], c[1][2]],
        [c[2][0], c[2][2]],
        [c[3][0], c[3][2]],
    ]
}

/// Shoelace area, signed by orientation.
pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Sutherland–Hodgman: clips `subject` against the convex, positively
/// oriented polygon `clip`.
pub fn clip_convex(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut output: Vec<P2> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: P2, q: P2, a: P2, b: P2) -> P2 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let d = [q[0] - p[0], q[1] - p[1]];
    let denom = e[0] * d[1] - e[1] * d[0];
    if denom.abs() < 1e-300 {
        return p;
    }
    let t = (e[0] * (a[1] - p[1]) - e[1] * (a[0] - p[0])) / denom;
    [p[0] + t * d[0], p[1] + t * d[1]]
}

fn bev_intersection(a: &OrientedBox3D, b: &OrientedBox3D) -> Option<f64> {
    let area_a = a.length() * a.width();
    let area_b = b.length() * b.width();
    if area_a < DEGENERATE_AREA || area_b < DEGENERATE_AREA {
        return None;
    }
    let ra = 0.5 * a.length().hypot(a.width());
    let rb = 0.5 * b.length().hypot(b.width());
    let dx = a.center[0] - b.center[0];
    let dz = a.center[2] - b.center[2];
    if dx * dx + dz * dz > (ra + rb) * (ra + rb) {
        return Some(0.0);
    }
    let clipped = clip_convex(&bev_polygon(a), &bev_polygon(b));
    Some(polygon_area(&clipped).abs())
}

/// Bird's-eye-view IoU of the two yaw-rotated footprints.
pub fn iou_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let Some(inter) = bev_intersection(a, b) else {
        return 0.0;
    };
    let union = a.length() * a.width() + b.length() * b.width() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let top = (a.center[1] - 0.5 * a.height()).max(b.center[1] - 0.5 * b.height());
    let bottom = (a.center[1] + 0.5 * a.height()).min(b.center[1] + 0.5 * b.height());
    let overlap_h = bottom - top;
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let Some(inter_area) = bev_intersection(a, b) else {
        return 0.0;
    };
    let inter = inter_area * overlap_h;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
