use super::{iou_3d, OrientedBox3D};

/// Greedy rotated NMS on 3D IoU.
///
/// Visits detections by descending score (stable, so ties keep input order)
/// and suppresses every later box whose IoU with a kept box exceeds
/// `iou_threshold`. Returns the kept indices in visiting order.
pub fn nms_rotated(detections: &[(OrientedBox3D, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.total_cmp(&detections[a].1));
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let kept = &detections[i].0;
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_3d(kept, &detections[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
