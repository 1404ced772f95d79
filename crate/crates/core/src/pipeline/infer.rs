use super::detections::DetectionResult;
use super::samples::{
    box_key, frustum_sample, keyed_rng, proposal_key, refinement_sample, FrustumSample, PreparedScene,
};
use crate::boxes::AnchorSet;
use crate::boxes::{decode, nms_rotated, BoxOffsets, OrientedBox3D};
use crate::config::Config;
use crate::geometry::FrustumFrame;
use crate::net::Network;
use crate::tensor::Tensor;
use crate::Result;

/// Applies `f` to every item on up to `workers` threads; results keep the
/// input order, so the output does not depend on the worker count.
pub fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// A decoded box before NMS: category index, box in the camera frame, score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub category: usize,
    pub bbox: OrientedBox3D,
    pub score: f64,
}

fn offsets_at(reg: &Tensor, position: usize, slot: usize) -> BoxOffsets {
    let c = reg.shape()[2];
    let base = position * c + slot * 7;
    let mut d = [0.0; 7];
    d.copy_from_slice(&reg.data()[base..base + 7]);
    BoxOffsets(d)
}

/// Decodes one sample's network outputs (`probs` `[1, P, K + 1]`, `reg`
/// `[1, P, K * N * 7]`). Every position whose foreground probability
/// `1 - p_background` exceeds `threshold` emits all yaw bins of its most
/// likely category, scored with that category's probability and ordered by
/// the magnitude of the predicted angle offset.
pub fn decode_candidates(
    probs: &Tensor,
    reg: &Tensor,
    anchors: &AnchorSet,
    frame: &FrustumFrame,
    threshold: f64,
) -> Vec<Candidate> {
    let (p, k, n) = (anchors.positions(), anchors.categories(), anchors.bins());
    let pr = probs.data();
    let mut out = Vec::new();
    for t in 0..p {
        let row = &pr[t * (k + 1)..(t + 1) * (k + 1)];
        if 1.0 - row[0] <= threshold {
            continue;
        }
        let mut cat = 0;
        for c in 1..k {
            if row[1 + c] > row[1 + cat] {
                cat = c;
            }
        }
        let score = row[1 + cat];
        let mut bins: Vec<(f64, Candidate)> = (0..n)
            .filter_map(|b| {
                let off = offsets_at(reg, t, cat * n + b);
                if !off.is_finite() {
                    return None;
                }
                let local = decode(&off, &anchors.anchor(t, cat, b)).bbox;
                Some((
                    off.0[6].abs(),
                    Candidate {
                        category: cat,
                        bbox: frame.box_to_world(&local),
                        score,
                    },
                ))
            })
            .collect();
        bins.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.extend(bins.into_iter().map(|(_, c)| c));
    }
    out
}

/// Per-category rotated NMS on `score_3d`, then ordering by fused score.
pub fn suppress(dets: Vec<DetectionResult>, iou_threshold: f64) -> Vec<DetectionResult> {
    let mut cats: Vec<&str> = Vec::new();
    for d in &dets {
        if !cats.contains(&d.category.as_str()) {
            cats.push(&d.category);
        }
    }
    let mut kept = Vec::new();
    for c in cats {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == c).collect();
        let scored: Vec<(OrientedBox3D, f64)> = idx.iter().map(|&i| (dets[i].bbox, dets[i].score_3d)).collect();
        kept.extend(nms_rotated(&scored, iou_threshold).into_iter().map(|j| idx[j]));
    }
    let mut out: Vec<DetectionResult> = kept.into_iter().map(|i| dets[i].clone()).collect();
    out.sort_by(|a, b| b.score_fused.total_cmp(&a.score_fused));
    out
}

/// First-stage detections of one scene.
pub fn infer_scene(net: &Network, scene: &PreparedScene, cfg: &Config) -> Result<Vec<DetectionResult>> {
    let per_proposal = parallel_map(
        &scene.proposals,
        cfg.workers,
        |i, prop| -> Result<Vec<DetectionResult>> {
            let mut rng = keyed_rng(cfg.seed, (&scene.frame_id, proposal_key(prop)));
            let sample = frustum_sample(scene, prop, cfg, false, &mut rng)?;
            if sample.point_count == 0 {
                return Ok(Vec::new());
            }
            let (probs, reg) = net.predict(std::slice::from_ref(&sample.input))?;
            Ok(
                decode_candidates(&probs, &reg, &sample.anchors, &sample.frame, cfg.fg_threshold)
                    .into_iter()
                    .map(|c| {
                        DetectionResult::new(
                            &scene.frame_id,
                            &cfg.categories[c.category],
                            c.bbox,
                            c.score,
                            prop.score_2d,
                            Some(i),
                        )
                    })
                    .collect(),
            )
        },
    );
    let mut all = Vec::new();
    for r in per_proposal {
        all.extend(r?);
    }
    Ok(suppress(all, cfg.nms_iou))
}

/// Box and score chosen by the refinement network for category `k`: the
/// position with the highest probability of `k`, decoded from its anchor.
pub fn refined_box(sample: &FrustumSample, probs: &Tensor, reg: &Tensor, k: usize) -> (OrientedBox3D, f64) {
    let kc = sample.anchors.categories();
    let pr = probs.data();
    let mut best = 0;
    for t in 1..sample.anchors.positions() {
        if pr[t * (kc + 1) + 1 + k] > pr[best * (kc + 1) + 1 + k] {
            best = t;
        }
    }
    let off = offsets_at(reg, best, k);
    let local = decode(&off, &sample.anchors.anchor(best, k, 0)).bbox;
    (sample.frame.box_to_world(&local), pr[best * (kc + 1) + 1 + k])
}

/// Re-estimates every detection inside its expanded, pose-normalized box,
/// one output per input in input order. Detections with too few points
/// nearby pass through unchanged.
pub fn refine_detections(
    net: &Network,
    scene: &PreparedScene,
    dets: &[DetectionResult],
    cfg: &Config,
) -> Result<Vec<DetectionResult>> {
    let refined = parallel_map(dets, cfg.workers, |_, d| -> Result<DetectionResult> {
        let Some(k) = cfg.category_index(&d.category) else {
            return Ok(d.clone());
        };
        let mut rng = keyed_rng(cfg.seed, (&scene.frame_id, box_key(&d.bbox)));
        let Some(sample) = refinement_sample(scene, &d.bbox, cfg, &mut rng)? else {
            return Ok(d.clone());
        };
        let (probs, reg) = net.predict(std::slice::from_ref(&sample.input))?;
        let (bbox, score) = refined_box(&sample, &probs, &reg, k);
        if !bbox.center.iter().chain(&bbox.sizes).all(|v| v.is_finite()) {
            return Ok(d.clone());
        }
        Ok(DetectionResult::new(
            &d.frame_id,
            &d.category,
            bbox,
            score,
            d.score_2d,
            d.proposal,
        ))
    });
    refined.into_iter().collect()
}

/// [`refine_detections`] followed by non-maximum suppression.
pub fn refine_scene(
    net: &Network,
    scene: &PreparedScene,
    dets: &[DetectionResult],
    cfg: &Config,
) -> Result<Vec<DetectionResult>> {
    Ok(suppress(refine_detections(net, scene, dets, cfg)?, cfg.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::linalg;
    use crate::io_data::make_synthetic_scene;
    use crate::net::NetSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> Config {
        let mut cfg = Config::preset("desk").unwrap();
        cfg.apply_overrides(&[
            "depth_max=16",
            "strides=0.25,0.5",
            "heights=0.5,1",
            "block_channels=8,8,8",
            "pointnet_widths=8,8",
            "deconv_channels=8",
            "num_points=64",
            "yaw_bins=4",
            "synth_depth_min=6",
            "synth_depth_max=12",
            "refine_points=64",
            "refine_slabs=8",
        ])
        .unwrap();
        cfg
    }

    fn scene(cfg: &Config) -> PreparedScene {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        PreparedScene::new(
            &make_synthetic_scene(&cfg.synth_config(), "000000", &mut rng).unwrap(),
            cfg,
        )
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<usize> = (0..23).collect();
        for w in 1..6 {
            assert_eq!(
                parallel_map(&xs, w, |i, x| i * 100 + x),
                parallel_map(&xs, 1, |i, x| i * 100 + x)
            );
        }
    }

    #[test]
    fn threshold_one_gives_no_detections() {
        let mut c = cfg();
        c.fg_threshold = 1.0;
        let s = scene(&c);
        let net = Network::new(NetSpec::from_config(&c), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(infer_scene(&net, &s, &c).unwrap().is_empty());
    }

    #[test]
    fn duplicate_proposals_give_the_same_detections() {
        let mut c = cfg();
        c.fg_threshold = 0.0;
        let mut s = scene(&c);
        let net = Network::new(NetSpec::from_config(&c), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let single = infer_scene(&net, &s, &c).unwrap();
        assert!(!single.is_empty());
        s.proposals.push(s.proposals[0].clone());
        let doubled = infer_scene(&net, &s, &c).unwrap();
        let strip = |v: &[DetectionResult]| v.iter().map(|d| (d.bbox, d.score_fused)).collect::<Vec<_>>();
        assert_eq!(strip(&single), strip(&doubled));
    }

    #[test]
    fn inference_is_independent_of_worker_count() {
        let mut c = cfg();
        c.fg_threshold = 0.0;
        let mut s = scene(&c);
        let p = s.proposals[0].clone();
        for dx in [-20.0, 15.0, 30.0] {
            let mut q = p.clone();
            q.image_box[0] += dx;
            q.image_box[2] += dx;
            s.proposals.push(q);
        }
        let net = Network::new(NetSpec::from_config(&c), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let one = infer_scene(&net, &s, &c).unwrap();
        c.workers = 3;
        assert_eq!(one, infer_scene(&net, &s, &c).unwrap());
    }

    #[test]
    fn emitted_boxes_survive_a_frame_roundtrip() {
        let mut c = cfg();
        c.fg_threshold = 0.0;
        let s = scene(&c);
        let net = Network::new(NetSpec::from_config(&c), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let frame = crate::geometry::frustum_frame(&s.proposals[0], &s.calib).unwrap();
        for d in infer_scene(&net, &s, &c).unwrap() {
            let back = frame.box_to_world(&frame.box_to_local(&d.bbox));
            assert!(linalg::norm(linalg::sub(back.center, d.bbox.center)) < 1e-9);
            assert!(crate::boxes::wrap_angle(back.yaw - d.bbox.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_offsets_at_the_center_position_return_the_input_box() {
        let c = cfg();
        let s = scene(&c);
        let b = s.gts[0].0;
        let sample = refinement_sample(&s, &b, &c, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .unwrap();
        let p = sample.anchors.positions();
        let center = (0..p).find(|&t| sample.anchors.centers[t][2].abs() < 1e-12).unwrap();
        let probs = Tensor::from_fn(&[1, p, 2], |i| match (i / 2 == center, i % 2) {
            (true, 1) => 0.9,
            (true, _) => 0.1,
            (false, 1) => 0.2,
            _ => 0.8,
        });
        let reg = Tensor::zeros(&[1, p, 7]);
        let (out, score) = refined_box(&sample, &probs, &reg, 0);
        assert_eq!(score, 0.9);
        assert!(linalg::norm(linalg::sub(out.center, b.center)) < 1e-9);
        assert_eq!(out.sizes, b.sizes);
        assert!(crate::boxes::wrap_angle(out.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn sparse_detections_pass_through_refinement() {
        let c = cfg();
        let s = scene(&c);
        let far = OrientedBox3D::new([50.0, 0.0, 200.0], [3.9, 1.6, 1.5], 0.0).unwrap();
        let d = DetectionResult::new("000000", "Car", far, 0.5, 0.5, None);
        let net = Network::new(NetSpec::refine_from_config(&c), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(refine_scene(&net, &s, std::slice::from_ref(&d), &c).unwrap(), vec![d]);
    }
}
