//! Anchor target assignment and the training losses.
//!
//! An anchor position is foreground for a category when its center lies in a
//! ground-truth box of that category shrunk by the shrink ratio; it is
//! ignored when the center lies in the full box but not in the shrunk one.
//! The classifier is trained with a softmax focal loss; the matched anchor
//! slot (category, nearest yaw bin) of every foreground position is trained
//! with a Euclidean center loss, smooth-L1 size/angle losses and a corner
//! loss that takes the better of the two headings.

use crate::boxes::{encode, wrap_angle, AnchorSet, OrientedBox3D};
use crate::config::Config;
use crate::geometry::linalg;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Label of one (position, category) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    Positive {
        /// Index of the matched ground truth.
        gt: usize,
        /// Yaw bin closest to the ground-truth heading.
        bin: usize,
        gt_box: OrientedBox3D,
    },
}

/// Labels for every (position, category) pair of one anchor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub positions: usize,
    pub categories: usize,
    /// Indexed by `position * categories + category`.
    pub labels: Vec<AnchorLabel>,
}

impl Assignment {
    pub fn label(&self, position: usize, category: usize) -> AnchorLabel {
        self.labels[position * self.categories + category]
    }

    /// Foreground entries as `(position, category, bin, gt box)`.
    pub fn positives(&self) -> Vec<(usize, usize, usize, OrientedBox3D)> {
        let mut out = Vec::new();
        for t in 0..self.positions {
            for k in 0..self.categories {
                if let AnchorLabel::Positive { bin, gt_box, .. } = self.label(t, k) {
                    out.push((t, k, bin, gt_box));
                }
            }
        }
        out
    }

    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }

    /// Classification target of a position: `Some(0)` background,
    /// `Some(k + 1)` category `k`, `None` ignored. A position that is positive
    /// for several categories takes the one whose ground truth is nearest.
    pub fn class_target(&self, position: usize, anchor_center: linalg::Vec3) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        let mut ignore = false;
        for k in 0..self.categories {
            match self.label(position, k) {
                AnchorLabel::Positive { gt_box, .. } => {
                    let d = linalg::norm(linalg::sub(gt_box.center, anchor_center));
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, k));
                    }
                }
                AnchorLabel::Ignore => ignore = true,
                AnchorLabel::Negative => {}
            }
        }
        match best {
            Some((_, k)) => Some(k + 1),
            None if ignore => None,
            None => Some(0),
        }
    }
}

/// Yaw bin whose anchor heading is closest to `yaw`; ties go to the lower bin.
pub fn nearest_bin(yaws: &[f64], yaw: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &a) in yaws.iter().enumerate() {
        let d = wrap_angle(yaw - a).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Labels every (position, category) pair. `gts` pairs boxes (in the anchor
/// frame) with category indices.
pub fn assign_targets(anchors: &AnchorSet, gts: &[(OrientedBox3D, usize)], shrink_ratio: f64) -> Assignment {
    let (p, kc) = (anchors.positions(), anchors.categories());
    let shrunk: Vec<OrientedBox3D> = gts.iter().map(|(b, _)| b.scaled(shrink_ratio)).collect();
    let mut labels = Vec::with_capacity(p * kc);
    for t in 0..p {
        let c = anchors.centers[t];
        for k in 0..kc {
            let mut best: Option<(f64, usize)> = None;
            let mut inside_full = false;
            for (g, (b, cat)) in gts.iter().enumerate() {
                if *cat != k {
                    continue;
                }
                if shrunk[g].contains(c) {
                    let d = linalg::norm(linalg::sub(b.center, c));
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, g));
                    }
                } else if b.contains(c) {
                    inside_full = true;
                }
            }
            labels.push(match best {
                Some((_, g)) => AnchorLabel::Positive {
                    gt: g,
                    bin: nearest_bin(&anchors.yaws, gts[g].0.yaw),
                    gt_box: gts[g].0,
                },
                None if inside_full => AnchorLabel::Ignore,
                None => AnchorLabel::Negative,
            });
        }
    }
    Assignment {
        positions: p,
        categories: kc,
        labels,
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_reg: f64,
    pub lambda_corner: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            lambda_reg: 1.0,
            lambda_corner: 10.0,
        }
    }
}

impl LossConfig {
    pub fn from_config(cfg: &Config) -> Self {
        LossConfig {
            gamma: cfg.focal_gamma,
            alpha: cfg.focal_alpha,
            lambda_reg: cfg.lambda_reg,
            lambda_corner: cfg.lambda_corner,
        }
    }
}

/// One training sample's anchors and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTargets {
    pub anchors: AnchorSet,
    pub assignment: Assignment,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub focal: Var,
    pub regression: Var,
    pub corner: Var,
    pub positives: usize,
}

fn check_shapes(tape: &Tape, logits: Var, reg: Var, targets: &[SampleTargets]) -> Result<(usize, usize, usize)> {
    let ls = tape.shape(logits);
    let rs = tape.shape(reg);
    let first = targets.first().ok_or_else(|| Error::Shape("no targets".into()))?;
    let (p, k, n) = (
        first.anchors.positions(),
        first.anchors.categories(),
        first.anchors.bins(),
    );
    if ls != [targets.len(), p, k + 1] || rs != [targets.len(), p, k * n * 7] {
        return Err(Error::Shape(format!(
            "logits {ls:?} and offsets {rs:?} do not fit {} samples of {p} positions, {k} categories, {n} bins",
            targets.len()
        )));
    }
    for t in targets {
        if (t.anchors.positions(), t.anchors.categories(), t.anchors.bins()) != (p, k, n)
            || (t.assignment.positions, t.assignment.categories) != (p, k)
        {
            return Err(Error::Shape("targets of one batch must share the anchor layout".into()));
        }
    }
    Ok((p, k, n))
}

fn total_positives(targets: &[SampleTargets]) -> usize {
    targets.iter().map(|t| t.assignment.positive_count()).sum()
}

/// Softmax focal loss over non-ignored positions, normalized by
/// `max(1, positives)`. `logits` is `[batch, positions, K + 1]`.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[SampleTargets], gamma: f64, alpha: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (p, c) = (shape[1], shape[2]);
    let mut idx = Vec::new();
    let mut weights = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for pos in 0..p {
            if let Some(cls) = t.assignment.class_target(pos, t.anchors.centers[pos]) {
                idx.push((b * p + pos) * c + cls);
                weights.push(if cls == 0 { 1.0 - alpha } else { alpha });
            }
        }
    }
    let norm = total_positives(targets).max(1) as f64;
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let logp_all = tape.log_softmax(logits);
    let logp = tape.gather(logp_all, &idx)?;
    let prob = tape.exp(logp);
    let q = tape.neg(prob);
    let q = tape.add_scalar(q, 1.0);
    let q = tape.relu(q);
    let modulating = tape.pow(q, gamma);
    let w = tape.constant(Tensor::new(vec![idx.len()], weights)?);
    let terms = tape.mul(modulating, logp)?;
    let terms = tape.mul(terms, w)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, -1.0 / norm))
}

/// Flat indices of the seven matched offsets of every positive, with the
/// matching targets and anchors.
struct Matched {
    idx: Vec<usize>,
    targets: Vec<f64>,
    anchors: Vec<OrientedBox3D>,
    gts: Vec<OrientedBox3D>,
}

fn matched(targets: &[SampleTargets], p: usize, k: usize, n: usize) -> Matched {
    let ch = k * n * 7;
    let mut m = Matched {
        idx: Vec::new(),
        targets: Vec::new(),
        anchors: Vec::new(),
        gts: Vec::new(),
    };
    for (b, t) in targets.iter().enumerate() {
        for (pos, cat, bin, gt) in t.assignment.positives() {
            let anchor = t.anchors.anchor(pos, cat, bin);
            let base = (b * p + pos) * ch + (cat * n + bin) * 7;
            m.idx.extend(base..base + 7);
            m.targets.extend_from_slice(&encode(&gt, &anchor).0);
            m.anchors.push(anchor);
            m.gts.push(gt);
        }
    }
    m
}

/// Euclidean center loss plus smooth-L1 size/angle loss on the matched slot
/// of every positive, normalized by the positive count.
pub fn regression_loss(tape: &mut Tape, reg: Var, targets: &[SampleTargets]) -> Result<Var> {
    let shape = tape.shape(reg).to_vec();
    let first = &targets[0].anchors;
    let m = matched(targets, shape[1], first.categories(), first.bins());
    let np = m.anchors.len();
    if np == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pred = tape.gather(reg, &m.idx)?;
    let pred = tape.reshape(pred, &[np, 7])?;
    let tgt = tape.constant(Tensor::new(vec![np, 7], m.targets)?);
    let diff = tape.sub(pred, tgt)?;
    let center = tape.slice(diff, 1, 0, 3)?;
    let center = tape.square(center);
    let center = tape.sum_axis(center, 1)?;
    let center = tape.sqrt(center);
    let center = tape.sum(center);
    let rest = tape.slice(diff, 1, 3, 4)?;
    let rest = tape.smooth_l1(rest, 1.0);
    let rest = tape.sum(rest);
    let s = tape.add(center, rest)?;
    Ok(tape.scale(s, 1.0 / np as f64))
}

/// Corner coordinates `[P, 8]` per axis for boxes given as tape values:
/// `center [P, 3]`, `sizes [P, 3]` as `(l, w, h)` and `yaw [P, 1]`.
fn corner_coords(tape: &mut Tape, center: Var, sizes: Var, yaw: Var) -> Result<[Var; 3]> {
    let np = tape.shape(center)[0];
    let half = 0.5;
    let sx = [half, -half, -half, half, half, -half, -half, half];
    let sz = [half, half, -half, -half, half, half, -half, -half];
    let sy = [-half, -half, -half, -half, half, half, half, half];
    let sel = |row: usize, signs: [f64; 8]| Tensor::from_fn(&[3, 8], |i| if i / 8 == row { signs[i % 8] } else { 0.0 });
    let mx = tape.constant(sel(0, sx));
    let mz = tape.constant(sel(1, sz));
    let my = tape.constant(sel(2, sy));
    let lx = tape.matmul(sizes, mx)?;
    let lz = tape.matmul(sizes, mz)?;
    let ly = tape.matmul(sizes, my)?;
    let ones = tape.constant(Tensor::full(&[1, 8], 1.0));
    let c = tape.cos(yaw);
    let s = tape.sin(yaw);
    let c = tape.matmul(c, ones)?;
    let s = tape.matmul(s, ones)?;
    let cx = tape.slice(center, 1, 0, 1)?;
    let cy = tape.slice(center, 1, 1, 1)?;
    let cz = tape.slice(center, 1, 2, 1)?;
    let cx = tape.matmul(cx, ones)?;
    let cy = tape.matmul(cy, ones)?;
    let cz = tape.matmul(cz, ones)?;
    let a = tape.mul(c, lx)?;
    let b = tape.mul(s, lz)?;
    let wx = tape.add(a, b)?;
    let a = tape.mul(s, lx)?;
    let b = tape.mul(c, lz)?;
    let wz = tape.sub(b, a)?;
    let x = tape.add(cx, wx)?;
    let y = tape.add(cy, ly)?;
    let z = tape.add(cz, wz)?;
    debug_assert_eq!(tape.shape(x), &[np, 8]);
    Ok([x, y, z])
}

fn corner_constants(boxes: &[OrientedBox3D]) -> [Tensor; 3] {
    let np = boxes.len();
    let corners: Vec<[linalg::Vec3; 8]> = boxes.iter().map(|b| b.corners()).collect();
    [0, 1, 2].map(|axis| Tensor::from_fn(&[np, 8], |i| corners[i / 8][i % 8][axis]))
}

/// Mean over corners of smooth-L1 corner distances to the ground truth or its
/// heading-flipped twin, whichever is smaller, normalized by the positive count.
pub fn corner_loss(tape: &mut Tape, reg: Var, targets: &[SampleTargets]) -> Result<Var> {
    let shape = tape.shape(reg).to_vec();
    let first = &targets[0].anchors;
    let m = matched(targets, shape[1], first.categories(), first.bins());
    let np = m.anchors.len();
    if np == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pred = tape.gather(reg, &m.idx)?;
    let pred = tape.reshape(pred, &[np, 7])?;
    let ac = tape.constant(Tensor::from_fn(&[np, 3], |i| m.anchors[i / 3].center[i % 3]));
    let asz = tape.constant(Tensor::from_fn(&[np, 3], |i| m.anchors[i / 3].sizes[i % 3]));
    let ayaw = tape.constant(Tensor::from_fn(&[np, 1], |i| m.anchors[i].yaw));
    let dc = tape.slice(pred, 1, 0, 3)?;
    let ds = tape.slice(pred, 1, 3, 3)?;
    let dt = tape.slice(pred, 1, 6, 1)?;
    let center = tape.add(ac, dc)?;
    let grow = tape.mul(asz, ds)?;
    let sizes = tape.add(asz, grow)?;
    let yaw = tape.add(ayaw, dt)?;
    let pc = corner_coords(tape, center, sizes, yaw)?;

    let flipped: Vec<OrientedBox3D> = m.gts.iter().map(|g| g.flipped()).collect();
    let mut per_box = Vec::with_capacity(2);
    for boxes in [&m.gts, &flipped] {
        let gc = corner_constants(boxes);
        let mut sq = None;
        for axis in 0..3 {
            let g = tape.constant(gc[axis].clone());
            let d = tape.sub(pc[axis], g)?;
            let d = tape.square(d);
            sq = Some(match sq {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
        let dist = tape.sqrt(sq.expect("three axes"));
        let sl = tape.smooth_l1(dist, 1.0);
        let s = tape.sum_axis(sl, 1)?;
        per_box.push(tape.scale(s, 1.0 / 8.0));
    }
    let best = tape.minimum(per_box[0], per_box[1])?;
    let s = tape.sum(best);
    Ok(tape.scale(s, 1.0 / np as f64))
}

/// `focal + lambda_reg * regression + lambda_corner * corner`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    reg: Var,
    targets: &[SampleTargets],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_shapes(tape, logits, reg, targets)?;
    let focal = focal_loss(tape, logits, targets, cfg.gamma, cfg.alpha)?;
    let regression = regression_loss(tape, reg, targets)?;
    let corner = corner_loss(tape, reg, targets)?;
    let r = tape.scale(regression, cfg.lambda_reg);
    let c = tape.scale(corner, cfg.lambda_corner);
    let t = tape.add(focal, r)?;
    let total = tape.add(t, c)?;
    Ok(LossOutput {
        total,
        focal,
        regression,
        corner,
        positives: total_positives(targets),
    })
}
