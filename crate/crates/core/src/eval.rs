//! KITTI-style average precision for 3D and bird's-eye-view boxes.
//!
//! For a difficulty level `D`, ground truths of level `D` or easier are
//! "care" boxes; harder and ignore-level ground truths are "don't care".
//! Within each scene detections are visited by descending score and each
//! takes the unmatched ground truth of its category with the highest IoU at
//! or above the category threshold. A match to a care box is a true
//! positive, a match to a don't-care box is dropped, and an unmatched
//! detection is a false positive. Precision is interpolated at evenly spaced
//! recall points and averaged.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::boxes::{iou_3d, iou_bev, OrientedBox3D};
use crate::config::Config;
use crate::io_data::{Difficulty, Label};
use crate::pipeline::{parallel_map, DetectionResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMode {
    ThreeD,
    Bev,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::ThreeD, EvalMode::Bev];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::ThreeD => "3d",
            EvalMode::Bev => "bev",
        }
    }

    pub fn iou(self, a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
        match self {
            EvalMode::ThreeD => iou_3d(a, b),
            EvalMode::Bev => iou_bev(a, b),
        }
    }
}

/// A labeled box taking part in evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frame_id: String,
    pub category: String,
    pub bbox: OrientedBox3D,
    pub difficulty: Difficulty,
}

impl GroundTruth {
    /// Ground truths of the labels that carry a 3D box.
    pub fn from_labels(frame_id: &str, labels: &[Label]) -> Vec<GroundTruth> {
        labels
            .iter()
            .filter_map(|l| {
                Some(GroundTruth {
                    frame_id: frame_id.to_string(),
                    category: l.category.clone(),
                    bbox: l.bbox?,
                    difficulty: l.difficulty,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Categories to evaluate with their IoU thresholds.
    pub thresholds: Vec<(String, f64)>,
    /// 11 or 40 in the KITTI protocol; any positive count is accepted.
    pub recall_points: usize,
    pub difficulties: Vec<Difficulty>,
    pub workers: usize,
}

impl EvalConfig {
    pub fn from_config(cfg: &Config) -> Self {
        EvalConfig {
            thresholds: cfg
                .categories
                .iter()
                .map(|c| (c.clone(), cfg.eval_threshold(c)))
                .collect(),
            recall_points: cfg.recall_points,
            difficulties: Difficulty::LEVELS.to_vec(),
            workers: cfg.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recall_points == 0 {
            return Err(Error::Config("recall_points must be positive".into()));
        }
        for (c, t) in &self.thresholds {
            if !(*t > 0.0 && *t <= 1.0) {
                return Err(Error::Config(format!("IoU threshold {t} for {c} must be in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Recall levels at which precision is sampled: `{0, 0.1, ..., 1}` for 11
/// points, `{1/40, ..., 1}` for 40, otherwise `n` evenly spaced levels in `[0, 1]`.
pub fn recall_levels(n: usize) -> Vec<f64> {
    match n {
        40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        1 => vec![1.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Interpolated AP of a ranked list of `(score, true_positive)` against
/// `positives` care boxes. Detections with equal scores form one operating
/// point, so the value does not depend on their order.
pub fn interpolated_ap(scored: &[(f64, bool)], positives: usize, recall_points: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(s, hit)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == ranked.len() || ranked[i + 1].0 != s {
            curve.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let levels = recall_levels(recall_points);
    let sum: f64 = levels
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(sum / levels.len() as f64)
}

/// Outcome of matching one category at one difficulty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(score, true_positive)` for every counted detection.
    pub scored: Vec<(f64, bool)>,
    pub positives: usize,
}

/// Total order on boxes, used to break score ties independently of input order.
fn box_order(a: &OrientedBox3D, b: &OrientedBox3D) -> std::cmp::Ordering {
    let key = |x: &OrientedBox3D| {
        [
            x.center[0],
            x.center[1],
            x.center[2],
            x.sizes[0],
            x.sizes[1],
            x.sizes[2],
            x.yaw,
        ]
    };
    key(a)
        .iter()
        .zip(key(b).iter())
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn is_care(gt: Difficulty, level: Difficulty) -> bool {
    gt != Difficulty::Ignore && gt <= level
}

/// Greedy per-scene matching of `category` detections at `level`.
pub fn match_category(
    dets: &[DetectionResult],
    gts: &[GroundTruth],
    category: &str,
    level: Difficulty,
    threshold: f64,
    mode: EvalMode,
) -> MatchResult {
    let mut by_frame: BTreeMap<&str, (Vec<&DetectionResult>, Vec<&GroundTruth>)> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.category == category) {
        by_frame.entry(&d.frame_id).or_default().0.push(d);
    }
    for g in gts.iter().filter(|g| g.category == category) {
        by_frame.entry(&g.frame_id).or_default().1.push(g);
    }
    let mut out = MatchResult::default();
    for (_, (mut fd, fg)) in by_frame {
        out.positives += fg.iter().filter(|g| is_care(g.difficulty, level)).count();
        fd.sort_by(|a, b| {
            b.score_fused
                .total_cmp(&a.score_fused)
                .then_with(|| box_order(&a.bbox, &b.bbox))
        });
        let mut taken = vec![false; fg.len()];
        for d in fd {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in fg.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = mode.iou(&d.bbox, &g.bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    if is_care(fg[j].difficulty, level) {
                        out.scored.push((d.score_fused, true));
                    }
                }
                None => out.scored.push((d.score_fused, false)),
            }
        }
    }
    out
}

/// AP of one category at one difficulty, `None` without care ground truths.
pub fn average_precision(
    dets: &[DetectionResult],
    gts: &[GroundTruth],
    category: &str,
    level: Difficulty,
    threshold: f64,
    mode: EvalMode,
    recall_points: usize,
) -> Option<f64> {
    let m = match_category(dets, gts, category, level, threshold, mode);
    interpolated_ap(&m.scored, m.positives, recall_points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApEntry {
    pub mode: EvalMode,
    pub category: String,
    pub difficulty: Difficulty,
    pub threshold: f64,
    pub ap: Option<f64>,
    pub positives: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<ApEntry>,
}

impl EvalReport {
    pub fn get(&self, mode: EvalMode, category: &str, difficulty: Difficulty) -> Option<&ApEntry> {
        self.entries
            .iter()
            .find(|e| e.mode == mode && e.category == category && e.difficulty == difficulty)
    }

    /// Human-readable table, AP in percent; `-` marks categories without
    /// ground truths.
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<5} {:<12} {:>5} {:>9} {:>9} {:>9}",
            "mode", "category", "iou", "easy", "moderate", "hard"
        );
        let mut rows: Vec<(EvalMode, &str, f64)> = Vec::new();
        for e in &self.entries {
            if !rows.iter().any(|r| r.0 == e.mode && r.1 == e.category) {
                rows.push((e.mode, &e.category, e.threshold));
            }
        }
        for (mode, cat, thr) in rows {
            let _ = write!(out, "{:<5} {:<12} {:>5.2}", mode.name(), cat, thr);
            for level in Difficulty::LEVELS {
                match self.get(mode, cat, level).and_then(|e| e.ap) {
                    Some(ap) => {
                        let _ = write!(out, " {:>9.2}", 100.0 * ap);
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// One `ap.<mode>.<category>.<difficulty>=<value>` line per entry, with
    /// `absent` when there are no ground truths.
    pub fn format_kv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let v = e.ap.map_or_else(|| "absent".to_string(), |a| a.to_string());
            let _ = writeln!(out, "ap.{}.{}.{}={v}", e.mode.name(), e.category, e.difficulty.name());
        }
        out
    }
}

/// AP for every configured category, difficulty and mode.
pub fn evaluate(dets: &[DetectionResult], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let jobs: Vec<(EvalMode, &(String, f64))> = EvalMode::ALL
        .iter()
        .flat_map(|&m| cfg.thresholds.iter().map(move |t| (m, t)))
        .collect();
    let counts: HashMap<&str, usize> = cfg
        .thresholds
        .iter()
        .map(|(c, _)| (c.as_str(), dets.iter().filter(|d| &d.category == c).count()))
        .collect();
    let per_job = parallel_map(&jobs, cfg.workers, |_, &(mode, (cat, thr))| {
        cfg.difficulties
            .iter()
            .map(|&level| {
                let m = match_category(dets, gts, cat, level, *thr, mode);
                ApEntry {
                    mode,
                    category: cat.clone(),
                    difficulty: level,
                    threshold: *thr,
                    ap: interpolated_ap(&m.scored, m.positives, cfg.recall_points),
                    positives: m.positives,
                    detections: counts[cat.as_str()],
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(EvalReport {
        entries: per_job.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64) -> OrientedBox3D {
        OrientedBox3D::new([x, 0.0, 20.0], [4.0, 1.6, 1.5], 0.0).unwrap()
    }

    fn gt(frame: &str, x: f64, d: Difficulty) -> GroundTruth {
        GroundTruth {
            frame_id: frame.into(),
            category: "Car".into(),
            bbox: bx(x),
            difficulty: d,
        }
    }

    fn det(frame: &str, x: f64, score: f64) -> DetectionResult {
        DetectionResult::new(frame, "Car", bx(x), score, 0.0, None)
    }

    fn ap(dets: &[DetectionResult], gts: &[GroundTruth], points: usize) -> Option<f64> {
        average_precision(dets, gts, "Car", Difficulty::Hard, 0.7, EvalMode::ThreeD, points)
    }

    #[test]
    fn recall_levels_match_the_protocols() {
        let r11 = recall_levels(11);
        assert_eq!(r11.len(), 11);
        assert_eq!((r11[0], r11[10]), (0.0, 1.0));
        let r40 = recall_levels(40);
        assert_eq!((r40[0], r40[39]), (0.025, 1.0));
    }

    #[test]
    fn perfect_detections_give_one_and_none_give_zero() {
        let gts = vec![
            gt("a", 0.0, Difficulty::Easy),
            gt("a", 10.0, Difficulty::Moderate),
            gt("b", 0.0, Difficulty::Hard),
        ];
        let dets = vec![det("a", 0.0, 0.2), det("a", 10.0, 0.9), det("b", 0.0, 0.5)];
        assert_eq!(ap(&dets, &gts, 11), Some(1.0));
        assert_eq!(ap(&dets, &gts, 40), Some(1.0));
        assert_eq!(ap(&[], &gts, 11), Some(0.0));
        assert_eq!(ap(&dets, &[], 11), None);
    }

    #[test]
    fn crafted_curve_matches_hand_computation() {
        // Ranked: TP(0.9), FP(0.8), TP(0.7); two positives.
        // Curve points (r, p): (0.5, 1), (0.5, 0.5), (1, 2/3).
        // 11-point: r <= 0.5 -> 1 (6 levels), r > 0.5 -> 2/3 (5 levels).
        let gts = vec![gt("a", 0.0, Difficulty::Easy), gt("a", 10.0, Difficulty::Easy)];
        let dets = vec![det("a", 0.0, 0.9), det("a", 30.0, 0.8), det("a", 10.0, 0.7)];
        let expected = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
        assert!((ap(&dets, &gts, 11).unwrap() - expected).abs() < 1e-12);
        let expected40 = (20.0 + 20.0 * 2.0 / 3.0) / 40.0;
        assert!((ap(&dets, &gts, 40).unwrap() - expected40).abs() < 1e-12);
    }

    #[test]
    fn dont_care_matches_are_dropped() {
        let gts = vec![gt("a", 0.0, Difficulty::Easy), gt("a", 10.0, Difficulty::Ignore)];
        let dets = vec![det("a", 10.0, 0.95), det("a", 0.0, 0.9)];
        let m = match_category(&dets, &gts, "Car", Difficulty::Hard, 0.7, EvalMode::ThreeD);
        assert_eq!(m.positives, 1);
        assert_eq!(m.scored, vec![(0.9, true)]);
        // A hard box is don't-care at the easy level.
        let gts = vec![gt("a", 0.0, Difficulty::Hard)];
        assert_eq!(
            average_precision(&dets, &gts, "Car", Difficulty::Easy, 0.7, EvalMode::ThreeD, 11),
            None
        );
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = vec![gt("a", 0.0, Difficulty::Easy)];
        let dets = vec![det("a", 0.0, 0.9), det("a", 0.1, 0.8)];
        let m = match_category(&dets, &gts, "Car", Difficulty::Hard, 0.7, EvalMode::ThreeD);
        assert_eq!(m.scored, vec![(0.9, true), (0.8, false)]);
        assert_eq!(ap(&dets, &gts, 11), Some(1.0));
    }

    #[test]
    fn report_formats() {
        let gts = vec![gt("a", 0.0, Difficulty::Easy)];
        let dets = vec![det("a", 0.0, 0.9)];
        let cfg = EvalConfig {
            thresholds: vec![("Car".into(), 0.7), ("Pedestrian".into(), 0.5)],
            recall_points: 11,
            difficulties: Difficulty::LEVELS.to_vec(),
            workers: 2,
        };
        let r = evaluate(&dets, &gts, &cfg).unwrap();
        assert_eq!(r.entries.len(), 12);
        let kv = r.format_kv();
        assert!(kv.contains("ap.3d.Car.moderate=1\n"), "{kv}");
        assert!(kv.contains("ap.bev.Pedestrian.easy=absent\n"));
        assert!(r.format_text().contains("100.00"));
    }

    /// Exhaustive oracle: AP from the full precision/recall curve computed by
    /// brute force over every score cut-off.
    fn brute_ap(scored: &[(f64, bool)], positives: usize) -> f64 {
        let mut cuts: Vec<f64> = scored.iter().map(|s| s.0).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let pts: Vec<(f64, f64)> = cuts
            .iter()
            .map(|&c| {
                let kept: Vec<_> = scored.iter().filter(|s| s.0 >= c).collect();
                let tp = kept.iter().filter(|s| s.1).count() as f64;
                (tp / positives as f64, tp / kept.len() as f64)
            })
            .collect();
        (0..11)
            .map(|i| {
                let r = i as f64 / 10.0;
                pts.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force_and_stays_in_range(
            raw in prop::collection::vec((0u8..5, any::<bool>()), 0..6),
            extra in 0usize..3,
        ) {
            let scored: Vec<(f64, bool)> = raw.iter().map(|&(s, t)| (s as f64 / 4.0, t)).collect();
            let positives = scored.iter().filter(|s| s.1).count() + extra;
            if positives == 0 {
                prop_assert_eq!(interpolated_ap(&scored, positives, 11), None);
            } else {
                let a = interpolated_ap(&scored, positives, 11).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a - brute_ap(&scored, positives)).abs() < 1e-12);
                let mut rev = scored.clone();
                rev.reverse();
                prop_assert_eq!(interpolated_ap(&rev, positives, 11).unwrap(), a);
                if let Some(i) = scored.iter().position(|s| !s.1) {
                    let mut fewer = scored.clone();
                    fewer.remove(i);
                    prop_assert!(interpolated_ap(&fewer, positives, 11).unwrap() >= a - 1e-12);
                }
            }
        }

        #[test]
        fn scene_order_does_not_change_ap(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for f in 0..4 {
                let frame = format!("{f}");
                for _ in 0..rng.random_range(0..3) {
                    let x = rng.random_range(-10.0..10.0);
                    gts.push(gt(&frame, x, Difficulty::Easy));
                    dets.push(det(&frame, x + rng.random_range(-1.0..1.0), rng.random_range(0..4) as f64));
                }
            }
            let a = ap(&dets, &gts, 11);
            dets.reverse();
            gts.reverse();
            prop_assert_eq!(a, ap(&dets, &gts, 11));
        }
    }
}
