//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clap::Parser;
use fconv::boxes::{decode, encode, iou_3d, iou_bev, nms_rotated, wrap_angle, OrientedBox3D};
use fconv::cli::{execute, Cli};
use fconv::config::Config;
use fconv::eval::{average_precision, match_category, EvalMode, GroundTruth};
use fconv::geometry::{
    frustum_frame, multi_resolution_sequences, multi_resolution_sequences_local, FrustumFrame, Resolution,
};
use fconv::io_data::{
    augment_proposal, make_synthetic_scene, points_in_proposal, AugmentConfig, CameraCalib, CategoryTemplate,
    Difficulty, RegionProposal2D, SynthConfig,
};
use fconv::losses::{assign_targets, total_loss, AnchorLabel, LossConfig, SampleTargets};
use fconv::net::{Mode, NetSpec, Network, SampleInput};
use fconv::pipeline::{
    frustum_sample, infer_scene, refine_detections, train_first_stage, train_refinement, DetectionResult, PreparedScene,
};
use fconv::tensor::grad_check_with_floor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn random_box(rng: &mut ChaCha8Rng, center_spread: f64) -> OrientedBox3D {
    let c = [
        rng.random_range(-center_spread..center_spread),
        rng.random_range(-center_spread..center_spread),
        rng.random_range(-center_spread..center_spread),
    ];
    let s = [
        rng.random_range(0.5..4.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.5),
    ];
    OrientedBox3D::new(c, s, rng.random_range(-PI..PI)).unwrap()
}

fn oracle_in_proposal(points: &[[f64; 3]], calib: &CameraCalib, p: &RegionProposal2D) -> Vec<usize> {
    let m = &calib.projection;
    let [u0, v0, u1, v1] = p.image_box;
    (0..points.len())
        .filter(|&i| {
            let q = points[i];
            let r = |k: usize| m[k][0] * q[0] + m[k][1] * q[1] + m[k][2] * q[2] + m[k][3];
            let w = r(2);
            if !(q[2] > 0.0 && w > 0.0) {
                return false;
            }
            let (u, v) = (r(0) / w, r(1) / w);
            u0 < u && u < u1 && v0 < v && v < v1
        })
        .collect()
}

/// Box-local coordinates along (length, vertical, width) computed from the heading directly.
fn oracle_inside(b: &OrientedBox3D, p: [f64; 3], ratio: f64) -> bool {
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    let (s, c) = b.yaw.sin_cos();
    let along = d[0] * c - d[2] * s;
    let across = d[0] * s + d[2] * c;
    along.abs() <= 0.5 * ratio * b.sizes[0]
        && d[1].abs() <= 0.5 * ratio * b.sizes[2]
        && across.abs() <= 0.5 * ratio * b.sizes[1]
}

fn oracle_bin(yaw: f64, n: usize) -> usize {
    let w = wrap_angle(yaw);
    (((w + PI) / (2.0 * PI / n as f64)).floor() as usize).min(n - 1)
}

fn oracle_label(center: [f64; 3], k: usize, gts: &[(OrientedBox3D, usize)], ratio: f64, n_bins: usize) -> AnchorLabel {
    let mut best: Option<(f64, usize)> = None;
    let mut ignore = false;
    for (g, (b, cat)) in gts.iter().enumerate() {
        if *cat != k {
            continue;
        }
        if oracle_inside(b, center, ratio) {
            let d = (0..3).map(|i| (b.center[i] - center[i]).powi(2)).sum::<f64>().sqrt();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        } else if oracle_inside(b, center, 1.0) {
            ignore = true;
        }
    }
    match best {
        Some((_, g)) => AnchorLabel::Positive {
            gt: g,
            bin: oracle_bin(gts[g].0.yaw, n_bins),
            gt_box: gts[g].0,
        },
        None if ignore => AnchorLabel::Ignore,
        None => AnchorLabel::Negative,
    }
}

fn geometry_oracles() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig {
        templates: vec![
            CategoryTemplate {
                name: "Car".into(),
                mean_size: [3.9, 1.6, 1.56],
                size_jitter: 0.1,
            },
            CategoryTemplate {
                name: "Pedestrian".into(),
                mean_size: [0.8, 0.6, 1.73],
                size_jitter: 0.1,
            },
        ],
        boxes_per_scene: 3,
        depth_range: (5.0, 35.0),
        points_per_box: 80,
        clutter_points: 200,
        ground_points: 200,
        ..SynthConfig::default()
    };
    let resolutions = [
        Resolution::new(0.25, 0.5),
        Resolution::new(0.5, 1.0),
        Resolution::new(1.0, 2.0),
    ];
    let (depth_min, depth_max) = (0.0, 40.0);
    let sizes = [[3.9, 1.6, 1.56], [0.8, 0.6, 1.73]];
    let (shrink, bins) = (0.5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut pip_bad, mut slab_bad, mut label_bad) = (0usize, 0usize, 0usize);
    let (mut memberships, mut labels, mut positives) = (0usize, 0usize, 0usize);
    for i in 0..1000 {
        let scene = make_synthetic_scene(&synth, &format!("{i:06}"), &mut rng).unwrap();
        let points = scene.rect_points();
        let mut proposals = scene.proposals.clone();
        for _ in 0..2 {
            let (u, v) = (rng.random_range(0.0..1100.0), rng.random_range(0.0..300.0));
            let (w, h) = (rng.random_range(20.0..140.0), rng.random_range(20.0..75.0));
            proposals.push(RegionProposal2D::new([u, v, u + w, v + h], "Car", 0.5).unwrap());
        }
        for p in &proposals {
            let inside = points_in_proposal(&points, &scene.calib, p);
            if inside != oracle_in_proposal(&points, &scene.calib, p) {
                pip_bad += 1;
            }
            let frame = frustum_frame(p, &scene.calib).unwrap();
            let subset: Vec<[f64; 3]> = inside.iter().map(|&j| points[j]).collect();
            let seqs = multi_resolution_sequences(&subset, &frame, &resolutions, depth_min, depth_max).unwrap();
            for (seq, res) in seqs.iter().zip(&resolutions) {
                let count = ((depth_max - depth_min) / res.stride).round() as usize;
                if seq.len() != count {
                    slab_bad += 1;
                    continue;
                }
                for t in 0..count {
                    let lo = depth_min + t as f64 * res.stride;
                    let expected: Vec<usize> = (0..seq.points.len())
                        .filter(|&j| {
                            let z = seq.points[j][2];
                            z >= depth_min && z < depth_max && lo <= z && z < lo + res.height
                        })
                        .collect();
                    memberships += expected.len();
                    if seq.groups[t] != expected {
                        slab_bad += 1;
                    }
                }
            }
            let mut gts: Vec<(OrientedBox3D, usize)> = scene
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .filter_map(|l| Some((frame.box_to_local(&l.bbox?), usize::from(l.category != "Car"))))
                .collect();
            for _ in 0..3 {
                let k = rng.random_range(0..2);
                let jitter = |rng: &mut ChaCha8Rng, a: f64| a * (1.0 + rng.random_range(-0.3..0.3));
                let b = OrientedBox3D::new(
                    [
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(2.0..38.0),
                    ],
                    [
                        jitter(&mut rng, sizes[k][0]),
                        jitter(&mut rng, sizes[k][1]),
                        jitter(&mut rng, sizes[k][2]),
                    ],
                    rng.random_range(-PI..PI),
                )
                .unwrap();
                gts.push((b, k));
            }
            let anchors = fconv::boxes::build_anchors(&seqs[0], seqs[0].len() / 2, &sizes, bins).unwrap();
            let assignment = assign_targets(&anchors, &gts, shrink);
            for t in 0..anchors.positions() {
                for k in 0..2 {
                    let expected = oracle_label(anchors.centers[t], k, &gts, shrink, bins);
                    labels += 1;
                    if matches!(expected, AnchorLabel::Positive { .. }) {
                        positives += 1;
                    }
                    if assignment.label(t, k) != expected {
                        label_bad += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        pip_bad + slab_bad + label_bad == 0 && elapsed < Duration::from_secs(30) && positives > 0,
        format!(
            "mismatches: point-in-proposal {pip_bad}, slab grouping {slab_bad}, target assignment {label_bad}; \
             {memberships} slab memberships, {labels} labels ({positives} positive); {}",
            secs(elapsed)
        ),
    )
}

fn monte_carlo_iou(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for c in a.corners().iter().chain(b.corners().iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let bounds_vol: f64 = (0..3).map(|k| hi[k] - lo[k]).product();
    let (mut both, mut bev_both, mut bev_a, mut bev_b) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..samples {
        let p: [f64; 3] = std::array::from_fn(|k| rng.random_range(lo[k]..hi[k]));
        if oracle_inside(a, p, 1.0) && oracle_inside(b, p, 1.0) {
            both += 1;
        }
        let flat = |bx: &OrientedBox3D| {
            let mut q = p;
            q[1] = bx.center[1];
            oracle_inside(bx, q, 1.0)
        };
        let (ia, ib) = (flat(a), flat(b));
        bev_a += usize::from(ia);
        bev_b += usize::from(ib);
        bev_both += usize::from(ia && ib);
    }
    let inter = bounds_vol * both as f64 / samples as f64;
    let iou3 = inter / (a.volume() + b.volume() - inter);
    let bev = bev_both as f64 / (bev_a + bev_b - bev_both) as f64;
    (iou3, bev)
}

fn iou_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..200 {
        let a = random_box(&mut rng, 0.5);
        let b = random_box(&mut rng, 0.5);
        let (mc3, mcb) = monte_carlo_iou(&a, &b, 1_000_000, &mut rng);
        if mc3 > 0.0 {
            overlapping += 1;
        }
        worst = worst
            .max((iou_3d(&a, &b) - mc3).abs())
            .max((iou_bev(&a, &b) - mcb).abs());
    }
    let unit = |c: [f64; 3], s: [f64; 3]| OrientedBox3D::new(c, s, 0.0).unwrap();
    let mut analytic: Vec<(OrientedBox3D, OrientedBox3D, f64)> = vec![
        (unit([0.0; 3], [1.0; 3]), unit([0.5, 0.0, 0.0], [1.0; 3]), 1.0 / 3.0),
        (unit([0.0; 3], [1.0; 3]), unit([0.0; 3], [1.0; 3]), 1.0),
        (unit([0.0; 3], [1.0; 3]), unit([2.0, 0.0, 0.0], [1.0; 3]), 0.0),
        (unit([0.0; 3], [1.0; 3]), unit([0.5, 0.5, 0.5], [1.0; 3]), 0.125 / 1.875),
        (unit([0.0; 3], [2.0; 3]), unit([0.0; 3], [1.0; 3]), 1.0 / 8.0),
    ];
    for i in 0..15 {
        let dx = 0.1 * (i + 1) as f64 / 2.0;
        let dz = 0.05 * i as f64;
        let a = unit([0.0; 3], [2.0, 1.0, 1.5]);
        let b = unit([dx, 0.0, dz], [2.0, 1.0, 1.5]);
        let inter = (2.0 - dx) * (1.0 - dz) * 1.5;
        analytic.push((a, b, inter / (2.0 * 3.0 - inter)));
    }
    let analytic_err = analytic
        .iter()
        .map(|(a, b, v)| (iou_3d(a, b) - v).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    check(
        worst <= 0.01 && analytic_err <= 1e-12 && elapsed < Duration::from_secs(120),
        format!(
            "max |IoU - Monte Carlo| {worst:.5} over 200 pairs ({overlapping} overlapping, 3D and BEV); \
             analytic max error {analytic_err:.1e} over {} cases; {}",
            analytic.len(),
            secs(elapsed)
        ),
    )
}

fn codec_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_rel: f64 = 0.0;
    let mut worst_yaw: f64 = 0.0;
    for _ in 0..100_000 {
        let gt = random_box(&mut rng, 40.0);
        let anchor = random_box(&mut rng, 40.0);
        let d = decode(&encode(&gt, &anchor), &anchor);
        for k in 0..3 {
            worst_rel = worst_rel.max((d.bbox.center[k] - gt.center[k]).abs() / gt.center[k].abs().max(1.0));
            worst_rel = worst_rel.max((d.bbox.sizes[k] - gt.sizes[k]).abs() / gt.sizes[k]);
        }
        worst_yaw = worst_yaw.max(wrap_angle(d.bbox.yaw - gt.yaw).abs());
    }
    check(
        worst_rel <= 8.0 * f64::EPSILON * 64.0 && worst_yaw <= 1e-14,
        format!("100000 pairs: max relative center/size error {worst_rel:.1e}, max wrapped yaw error {worst_yaw:.1e}"),
    )
}

fn random_input(cfg: &Config, n_points: usize, seed: u64) -> SampleInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..n_points)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(cfg.depth_min..cfg.depth_max),
            ]
        })
        .collect();
    let seqs = multi_resolution_sequences_local(
        &pts,
        &FrustumFrame::identity(),
        &cfg.resolutions(),
        cfg.depth_min,
        cfg.depth_max,
    )
    .unwrap();
    SampleInput::from_sequences(&seqs, None)
}

fn shape_ledger() -> Outcome {
    let expected_kitti: Vec<(&str, Vec<usize>)> = vec![
        ("pointnet0", vec![280, 128]),
        ("pointnet1", vec![140, 128]),
        ("pointnet2", vec![70, 256]),
        ("pointnet3", vec![35, 512]),
        ("block1", vec![280, 128]),
        ("block2", vec![140, 128]),
        ("concat2", vec![140, 256]),
        ("merge2", vec![140, 128]),
        ("deconv2", vec![140, 256]),
        ("block3", vec![70, 256]),
        ("concat3", vec![70, 512]),
        ("merge3", vec![70, 256]),
        ("deconv3", vec![140, 256]),
        ("block4", vec![35, 512]),
        ("concat4", vec![35, 1024]),
        ("merge4", vec![35, 512]),
        ("deconv4", vec![140, 256]),
        ("fused", vec![140, 768]),
        ("cls", vec![140, 2]),
        ("reg", vec![140, 84]),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for preset in ["kitti-4block", "sunrgbd-5block"] {
        let cfg = Config::preset(preset).unwrap();
        let net = Network::new(NetSpec::from_config(&cfg), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ledger = net.shape_ledger(&[random_input(&cfg, 200, 5)]).unwrap();
        let get = |n: &str| ledger.iter().find(|e| e.0 == n).map(|e| e.1.clone());
        if preset == "kitti-4block" {
            let got: Vec<(&str, Option<Vec<usize>>)> = expected_kitti.iter().map(|(n, _)| (*n, get(n))).collect();
            let bad: Vec<&str> = expected_kitti
                .iter()
                .zip(&got)
                .filter(|(e, g)| Some(&e.1) != g.1.as_ref())
                .map(|(e, _)| e.0)
                .collect();
            ok &= bad.is_empty() && ledger.len() == expected_kitti.len();
            lines.push(format!("{preset}: {} entries, mismatched {bad:?}", ledger.len()));
        } else {
            let blocks: Vec<Option<Vec<usize>>> = (1..=5).map(|b| get(&format!("block{b}"))).collect();
            let expected_blocks: Vec<Option<Vec<usize>>> = [[80, 64], [40, 128], [20, 256], [10, 512], [5, 512]]
                .iter()
                .map(|s| Some(s.to_vec()))
                .collect();
            let deconvs_ok = (2..=5).all(|b| get(&format!("deconv{b}")) == Some(vec![40, 256]));
            let fused = get("fused");
            ok &= blocks == expected_blocks && deconvs_ok && fused == Some(vec![40, 1024]);
            lines.push(format!(
                "{preset}: blocks {blocks:?}, deconvs 40x256 {deconvs_ok}, fused {fused:?}"
            ));
        }
    }
    check(ok, lines.join("; "))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let spec = NetSpec {
        point_channels: 3,
        pointnet_hidden: [8, 8],
        block_channels: vec![16, 16, 16],
        resolutions: 2,
        deconv_channels: 8,
        categories: 1,
        bins: 4,
        seq_len: 8,
    };
    let net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<[f64; 3]> = (0..20)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..8.0),
            ]
        })
        .collect();
    let res = [Resolution::new(1.0, 2.0), Resolution::new(2.0, 4.0)];
    let seqs = multi_resolution_sequences_local(&pts, &FrustumFrame::identity(), &res, 0.0, 8.0).unwrap();
    let input = SampleInput::from_sequences(&seqs, None);
    let anchors = fconv::boxes::build_anchors(&seqs[0], 4, &[[3.0, 1.6, 1.5]], 4).unwrap();
    let gt = OrientedBox3D::new([0.1, 0.05, 4.1], [3.2, 1.7, 1.4], 0.3).unwrap();
    let assignment = assign_targets(&anchors, &[(gt, 0)], 0.5);
    let positives = assignment.positive_count();
    let targets = SampleTargets { anchors, assignment };
    let loss_cfg = LossConfig::default();
    let params: Vec<_> = (0..net.params.len()).map(|i| net.params.tensor(i).clone()).collect();
    let (eps, floor) = (1e-5, 1e-5);
    let report = grad_check_with_floor(
        |tape, vars| {
            let out = net.forward(tape, vars, std::slice::from_ref(&input), Mode::Train)?;
            Ok(total_loss(tape, out.cls_logits, out.reg, std::slice::from_ref(&targets), &loss_cfg)?.total)
        },
        &params,
        eps,
        floor,
    )
    .unwrap();
    let elapsed = start.elapsed();
    check(
        report.max_rel_error < 1e-4 && report.checked > 0 && positives > 0 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {:.2e} (step {eps:.0e}, denominator floor {floor:.0e}) over {} coordinates \
             ({} skipped at kinks), {positives} positive anchors; {}",
            report.max_rel_error,
            report.checked,
            report.skipped,
            secs(elapsed)
        ),
    )
}

fn toy_scenes(cfg: &Config, n: usize, prefix: &str, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<PreparedScene> {
    let aug = AugmentConfig {
        jitter_frac: jitter,
        scale_frac: jitter,
        ..AugmentConfig::none()
    };
    (0..n)
        .map(|i| {
            let mut s = make_synthetic_scene(&cfg.synth_config(), &format!("{prefix}{i:05}"), rng).unwrap();
            for p in s.proposals.iter_mut() {
                *p = augment_proposal(p, rng, &aug);
            }
            PreparedScene::new(&s, cfg)
        })
        .collect()
}

fn permutation_and_empty() -> Outcome {
    let cfg = Config::preset("desk").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scenes = toy_scenes(&cfg, 3, "p", 0.0, &mut rng);
    let net = Network::new(NetSpec::from_config(&cfg), &mut rng).unwrap();
    let (mut samples, mut empty_rows, mut bad_rows, mut bit_diffs) = (0, 0, 0, 0);
    for scene in &scenes {
        for p in &scene.proposals {
            let sample = frustum_sample(scene, p, &cfg, false, &mut rng).unwrap();
            samples += 1;
            let mut shuffled = sample.input.clone();
            for lvl in shuffled.levels.iter_mut() {
                let c = lvl.channels;
                for t in 0..lvl.slabs() {
                    let (a, b) = (lvl.offsets[t], lvl.offsets[t + 1]);
                    let mut rows: Vec<Vec<f64>> = lvl.rows[a * c..b * c].chunks(c).map(<[f64]>::to_vec).collect();
                    rows.shuffle(&mut rng);
                    lvl.rows[a * c..b * c].copy_from_slice(&rows.concat());
                }
            }
            let (p0, r0) = net.predict(std::slice::from_ref(&sample.input)).unwrap();
            let (p1, r1) = net.predict(std::slice::from_ref(&shuffled)).unwrap();
            let bits = |t: &fconv::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if bits(&p0) != bits(&p1) || bits(&r0) != bits(&r1) {
                bit_diffs += 1;
            }
            for (r, lvl) in sample.input.levels.iter().enumerate() {
                let map = net.feature_map(&sample.input, r).unwrap();
                for t in 0..lvl.slabs() {
                    if lvl.offsets[t] == lvl.offsets[t + 1] {
                        empty_rows += 1;
                        if map.row(t).iter().any(|&v| v != 0.0) {
                            bad_rows += 1;
                        }
                    }
                }
            }
        }
    }
    check(
        bit_diffs == 0 && bad_rows == 0 && empty_rows > 0,
        format!(
            "{samples} samples: {bit_diffs} with output bits changed by in-slab shuffling; \
             {bad_rows} nonzero among {empty_rows} empty-slab feature rows"
        ),
    )
}

fn toy_overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::preset("desk").unwrap();
    cfg.apply_overrides(&["steps=300", "augment=false", "workers=1"])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scenes = toy_scenes(&cfg, 10, "o", 0.0, &mut rng);
    let mut net = Network::new(NetSpec::from_config(&cfg), &mut rng).unwrap();
    let report = train_first_stage(&mut net, &scenes, &cfg, &mut rng).unwrap();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in &scenes {
        dets.extend(infer_scene(&net, s, &cfg).unwrap());
        for (b, k) in &s.gts {
            gts.push(GroundTruth {
                frame_id: s.frame_id.clone(),
                category: cfg.categories[*k].clone(),
                bbox: *b,
                difficulty: Difficulty::Easy,
            });
        }
    }
    let (level, thr) = (Difficulty::Hard, 0.5);
    let m = match_category(&dets, &gts, "Car", level, thr, EvalMode::ThreeD);
    let tp = m.scored.iter().filter(|s| s.1).count();
    let recall = tp as f64 / m.positives as f64;
    let ap = average_precision(&dets, &gts, "Car", level, thr, EvalMode::ThreeD, cfg.recall_points).unwrap_or(0.0);
    let elapsed = start.elapsed();
    check(
        recall == 1.0 && ap >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "{} steps, final loss {:.4}; recall {recall:.3} ({tp}/{}), AP {ap:.4} at 3D IoU 0.5 over {} detections; {}",
            report.steps,
            report.step_losses.last().copied().unwrap_or(f64::NAN),
            m.positives,
            dets.len(),
            secs(elapsed)
        ),
    )
}

fn refinement_benefit() -> Outcome {
    let start = Instant::now();
    let mut cfg = Config::preset("desk").unwrap();
    cfg.apply_overrides(&["steps=300"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = toy_scenes(&cfg, 20, "t", 0.2, &mut rng);
    let test = toy_scenes(&cfg, 100, "e", 0.2, &mut rng);
    let mut net = Network::new(NetSpec::from_config(&cfg), &mut rng).unwrap();
    train_first_stage(&mut net, &train, &cfg, &mut rng).unwrap();
    let mut refine_cfg = cfg.clone();
    refine_cfg.apply_overrides(&["steps=1000"]).unwrap();
    let mut refiner = Network::new(NetSpec::refine_from_config(&cfg), &mut rng).unwrap();
    train_refinement(&mut refiner, &train, &refine_cfg, &mut rng).unwrap();
    let (mut paired, mut improved, mut before, mut after, mut total) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for s in &test {
        let dets = infer_scene(&net, s, &cfg).unwrap();
        let refined = refine_detections(&refiner, s, &dets, &cfg).unwrap();
        total += dets.len();
        let best = |b: &OrientedBox3D| s.gts.iter().map(|(g, _)| iou_3d(b, g)).fold(0.0, f64::max);
        for (d, r) in dets.iter().zip(&refined) {
            let (a, b) = (best(&d.bbox), best(&r.bbox));
            if a > 0.0 || b > 0.0 {
                paired += 1;
                before += a;
                after += b;
                improved += usize::from(b > a);
            }
        }
    }
    let (mean_before, mean_after) = (before / paired.max(1) as f64, after / paired.max(1) as f64);
    let rate = improved as f64 / paired.max(1) as f64;
    check(
        paired > 0 && mean_after >= mean_before && rate >= 0.7,
        format!(
            "{paired} of {total} detections overlap ground truth: mean IoU {mean_before:.4} -> {mean_after:.4}, \
             improved {improved} ({:.1}%); {}",
            100.0 * rate,
            secs(start.elapsed())
        ),
    )
}

fn reference_nms(dets: &[(OrientedBox3D, f64)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for (pos, &i) in alive.iter().enumerate() {
            if dets[i].1 > dets[alive[best]].1 {
                best = pos;
            }
        }
        let k = alive.remove(best);
        keep.push(k);
        alive.retain(|&j| iou_3d(&dets[k].0, &dets[j].0) <= thr);
    }
    keep
}

fn det(frame: &str, b: OrientedBox3D, score: f64) -> DetectionResult {
    DetectionResult::new(frame, "Car", b, score, 0.0, None)
}

fn gt(frame: &str, b: OrientedBox3D) -> GroundTruth {
    GroundTruth {
        frame_id: frame.into(),
        category: "Car".into(),
        bbox: b,
        difficulty: Difficulty::Easy,
    }
}

fn nms_and_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut nms_bad = 0;
    let mut suppressed = 0;
    for _ in 0..500 {
        let n = rng.random_range(0..40);
        let thr = [0.1, 0.3, 0.5, 0.7][rng.random_range(0..4)];
        let dets: Vec<(OrientedBox3D, f64)> = (0..n)
            .map(|_| (random_box(&mut rng, 2.0), rng.random_range(0.0..1.0)))
            .collect();
        let kept = nms_rotated(&dets, thr);
        suppressed += n - kept.len();
        if kept != reference_nms(&dets, thr) {
            nms_bad += 1;
        }
    }
    let car = |x: f64| OrientedBox3D::new([x, 1.0, 20.0], [3.9, 1.6, 1.56], 0.0).unwrap();
    let far = |x: f64| OrientedBox3D::new([x, 1.0, 35.0], [3.9, 1.6, 1.56], 0.0).unwrap();
    let ap = |dets: &[DetectionResult], gts: &[GroundTruth], points: usize| {
        average_precision(dets, gts, "Car", Difficulty::Hard, 0.7, EvalMode::ThreeD, points).unwrap_or(f64::NAN)
    };
    let three: Vec<GroundTruth> = (0..3).map(|i| gt("a", car(10.0 * i as f64))).collect();
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "all correct",
            ap(
                &(0..3).map(|i| det("a", car(10.0 * i as f64), 0.9)).collect::<Vec<_>>(),
                &three,
                11,
            ),
            1.0,
        ),
        ("no detections", ap(&[], &three, 11), 0.0),
        (
            "hit, miss, hit over 3 ground truths",
            ap(
                &[
                    det("a", car(0.0), 0.9),
                    det("a", far(0.0), 0.8),
                    det("a", car(10.0), 0.7),
                ],
                &three,
                11,
            ),
            (4.0 + 3.0 * 2.0 / 3.0) / 11.0,
        ),
        (
            "false positive ranked first, single ground truth",
            ap(
                &[det("b", far(0.0), 0.9), det("b", car(0.0), 0.5)],
                &[gt("b", car(0.0))],
                11,
            ),
            0.5,
        ),
        (
            "one of two found, 40 recall points",
            ap(&[det("c", car(0.0), 0.9)], &[gt("c", car(0.0)), gt("c", car(10.0))], 40),
            0.5,
        ),
    ];
    let ap_bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    check(
        nms_bad == 0 && ap_bad.is_empty(),
        format!(
            "NMS mismatches {nms_bad}/500 ({suppressed} boxes suppressed); AP micro-cases {} of {} exact {ap_bad:?}",
            cases.len() - ap_bad.len(),
            cases.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("fconv").chain(args.iter().copied())).unwrap();
    let mut out = String::new();
    execute(&cli, &mut |s: &str| out.push_str(s)).unwrap();
    out
}

fn pipeline_run(dir: &std::path::Path) -> (Vec<u8>, String) {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let common = ["--preset", "desk", "--seed", "17", "--set", "steps=50"];
    let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |args: Vec<String>| run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&[
        "synth",
        "--out",
        &p("data"),
        "--count",
        "6",
        "--proposal-jitter",
        "0.1",
    ]));
    call(with(&["train", "--data", &p("data"), "--out", &p("model.ckpt")]));
    call(with(&[
        "infer",
        "--data",
        &p("data"),
        "--model",
        &p("model.ckpt"),
        "--out",
        &p("dets.txt"),
    ]));
    call(with(&[
        "eval",
        "--data",
        &p("data"),
        "--detections",
        &p("dets.txt"),
        "--out",
        &p("ap.txt"),
    ]));
    (
        std::fs::read(p("dets.txt")).unwrap(),
        std::fs::read_to_string(p("ap.txt")).unwrap(),
    )
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, ea) = pipeline_run(a.path());
    let (db, eb) = pipeline_run(b.path());
    let lines = da.iter().filter(|&&c| c == b'\n').count();
    check(
        da == db && ea == eb && lines > 0,
        format!(
            "detection files {} bytes ({lines} lines), identical {}; eval identical {}",
            da.len(),
            da == db,
            ea == eb
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("geometry oracles", geometry_oracles),
        ("IoU oracle", iou_oracle),
        ("codec exactness", codec_roundtrip),
        ("shape ledger", shape_ledger),
        ("gradient check", gradient_check),
        ("permutation and empty-slab invariance", permutation_and_empty),
        ("toy overfit", toy_overfit),
        ("refinement benefit", refinement_benefit),
        ("NMS and AP", nms_and_ap),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == id || name.contains(x.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
