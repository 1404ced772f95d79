//! Flat `key = value` configuration.
//!
//! Resolution order: a named preset supplies every value, then a config file
//! and finally command-line overrides replace individual keys. Lists are
//! comma-separated; sizes are written `LxWxH`; per-category thresholds are
//! written `Name:value`.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::{slab_count, Resolution};
use crate::io_data::{AugmentConfig, CategoryTemplate, SynthConfig};
use crate::{Error, Result};

/// Parsing and printing of a single config value.
pub trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("expected a number, got {s:?}"))?;
        if !v.is_finite() {
            return Err(format!("expected a finite number, got {s:?}"));
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got {s:?}"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for [f64; 3] {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('x').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected LxWxH, got {s:?}"));
        }
        Ok([f64::parse(parts[0])?, f64::parse(parts[1])?, f64::parse(parts[2])?])
    }
    fn render(&self) -> String {
        format!("{}x{}x{}", self[0], self[1], self[2])
    }
}

impl ConfigValue for (String, f64) {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let (name, v) = s
            .split_once(':')
            .ok_or_else(|| format!("expected Name:value, got {s:?}"))?;
        Ok((name.trim().to_string(), f64::parse(v.trim())?))
    }
    fn render(&self) -> String {
        format!("{}:{}", self.0, self.1.render())
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_keys {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty, )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Config {
            /// Every valid key, in rendering order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse(value.trim())
                            .map_err(|e| Error::Config(format!("key {key}: {e}")))?;
                    } )*
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown key {key:?}; valid keys: {}",
                            Self::KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            /// `(key, rendered value)` pairs in key order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.render()) ),*]
            }
        }
    };
}

config_keys! {
    /// Name of the preset the values started from.
    preset: String,
    categories: Vec<String>,
    /// Per-category anchor sizes `LxWxH`, aligned with `categories`.
    mean_sizes: Vec<[f64; 3]>,
    yaw_bins: usize,
    depth_min: f64,
    depth_max: f64,
    /// Slab strides, finest first; each doubles the previous.
    strides: Vec<f64>,
    /// Slab heights, aligned with `strides`.
    heights: Vec<f64>,
    /// Output width of every conv block; entry 0 is also the base PointNet width.
    block_channels: Vec<usize>,
    /// Hidden widths of the PointNet layers before the final one.
    pointnet_widths: Vec<usize>,
    deconv_channels: usize,
    /// Appends the intensity channel to the relative point coordinates.
    use_intensity: bool,
    /// Points sampled per proposal.
    num_points: usize,
    shrink_ratio: f64,
    focal_gamma: f64,
    focal_alpha: f64,
    lambda_reg: f64,
    lambda_corner: f64,
    batch_size: usize,
    epochs: usize,
    /// When non-zero, training stops after exactly this many steps.
    steps: usize,
    learning_rate: f64,
    lr_decay: f64,
    lr_decay_every: usize,
    weight_decay: f64,
    bn_momentum: f64,
    augment: bool,
    aug_jitter: f64,
    aug_scale: f64,
    aug_flip: f64,
    aug_shift: f64,
    fg_threshold: f64,
    nms_iou: f64,
    refine_expand: f64,
    refine_points: usize,
    /// Slab count of the refinement network's input sequence.
    refine_slabs: usize,
    /// Relative jitter applied to ground-truth boxes to make refinement training inputs.
    refine_jitter: f64,
    /// Per-category IoU thresholds for evaluation.
    eval_iou: Vec<(String, f64)>,
    /// Threshold for categories not listed in `eval_iou`.
    eval_default_iou: f64,
    /// Interpolation points of the precision/recall curve (11 or 40).
    recall_points: usize,
    synth_boxes: usize,
    synth_depth_min: f64,
    synth_depth_max: f64,
    synth_points_per_box: usize,
    synth_clutter: usize,
    synth_ground: usize,
    synth_size_jitter: f64,
    seed: u64,
    workers: usize,
}

pub const PRESETS: &[&str] = &["kitti-4block", "sunrgbd-5block", "desk"];

impl Default for Config {
    fn default() -> Self {
        Config::kitti_4block()
    }
}

impl Config {
    fn kitti_4block() -> Self {
        Config {
            preset: "kitti-4block".into(),
            categories: vec!["Car".into()],
            mean_sizes: vec![[3.9, 1.6, 1.56]],
            yaw_bins: 12,
            depth_min: 0.0,
            depth_max: 70.0,
            strides: vec![0.25, 0.5, 1.0, 2.0],
            heights: vec![0.5, 1.0, 2.0, 4.0],
            block_channels: vec![128, 128, 256, 512],
            pointnet_widths: vec![64, 128],
            deconv_channels: 256,
            use_intensity: false,
            num_points: 1024,
            shrink_ratio: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda_reg: 1.0,
            lambda_corner: 10.0,
            batch_size: 32,
            epochs: 50,
            steps: 0,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 20,
            weight_decay: 1e-4,
            bn_momentum: 0.9,
            augment: true,
            aug_jitter: 0.1,
            aug_scale: 0.1,
            aug_flip: 0.5,
            aug_shift: 1.0,
            fg_threshold: 0.1,
            nms_iou: 0.1,
            refine_expand: 1.2,
            refine_points: 512,
            refine_slabs: 32,
            refine_jitter: 0.1,
            eval_iou: vec![("Car".into(), 0.7), ("Pedestrian".into(), 0.5), ("Cyclist".into(), 0.5)],
            eval_default_iou: 0.5,
            recall_points: 11,
            synth_boxes: 1,
            synth_depth_min: 8.0,
            synth_depth_max: 30.0,
            synth_points_per_box: 300,
            synth_clutter: 1500,
            synth_ground: 1500,
            synth_size_jitter: 0.05,
            seed: 0,
            workers: 1,
        }
    }

    fn sunrgbd_5block() -> Self {
        let cats: [(&str, [f64; 3]); 10] = [
            ("bed", [2.1, 1.6, 1.0]),
            ("table", [1.2, 0.7, 0.75]),
            ("sofa", [1.9, 0.9, 0.85]),
            ("chair", [0.6, 0.6, 0.9]),
            ("toilet", [0.7, 0.45, 0.75]),
            ("desk", [1.2, 0.65, 0.75]),
            ("dresser", [0.9, 0.5, 0.9]),
            ("night_stand", [0.5, 0.45, 0.6]),
            ("bookshelf", [1.0, 0.35, 1.7]),
            ("bathtub", [1.6, 0.8, 0.55]),
        ];
        Config {
            preset: "sunrgbd-5block".into(),
            categories: cats.iter().map(|c| c.0.to_string()).collect(),
            mean_sizes: cats.iter().map(|c| c.1).collect(),
            depth_min: 0.0,
            depth_max: 8.0,
            strides: vec![0.1, 0.2, 0.4, 0.8, 1.6],
            heights: vec![0.2, 0.4, 0.8, 1.6, 3.2],
            block_channels: vec![64, 128, 256, 512, 512],
            num_points: 2048,
            aug_shift: 0.2,
            eval_iou: cats.iter().map(|c| (c.0.to_string(), 0.25)).collect(),
            eval_default_iou: 0.25,
            synth_depth_min: 2.0,
            synth_depth_max: 6.0,
            ..Config::kitti_4block()
        }
    }

    /// A small network and short depth range for single-core experiments.
    fn desk() -> Self {
        Config {
            preset: "desk".into(),
            depth_min: 0.0,
            depth_max: 40.0,
            strides: vec![0.25, 0.5, 1.0],
            heights: vec![0.5, 1.0, 2.0],
            block_channels: vec![32, 32, 64],
            pointnet_widths: vec![16, 32],
            deconv_channels: 32,
            num_points: 256,
            yaw_bins: 1,
            fg_threshold: 0.3,
            batch_size: 4,
            epochs: 20,
            lr_decay_every: 8,
            learning_rate: 2e-3,
            refine_slabs: 16,
            refine_jitter: 0.2,
            refine_points: 256,
            synth_clutter: 600,
            synth_ground: 600,
            synth_points_per_box: 200,
            ..Config::kitti_4block()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "kitti-4block" => Ok(Config::kitti_4block()),
            "sunrgbd-5block" => Ok(Config::sunrgbd_5block()),
            "desk" => Ok(Config::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::malformed(origin, Some(i + 1), format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Preset, then file, then overrides; the result is validated.
    pub fn resolve<S: AsRef<str>>(preset: &str, file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Config::preset(preset)?;
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config as a file that [`Config::apply_text`] reads back identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn resolutions(&self) -> Vec<Resolution> {
        self.strides
            .iter()
            .zip(&self.heights)
            .map(|(&s, &u)| Resolution::new(s, u))
            .collect()
    }

    /// Slab count of the finest input sequence.
    pub fn seq_len(&self) -> usize {
        slab_count(self.depth_min, self.depth_max, self.strides[0])
    }

    /// Number of header positions: half the input slab count.
    pub fn header_len(&self) -> usize {
        self.seq_len() / 2
    }

    pub fn point_channels(&self) -> usize {
        3 + usize::from(self.use_intensity)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn eval_threshold(&self, category: &str) -> f64 {
        self.eval_iou
            .iter()
            .find(|(c, _)| c == category)
            .map_or(self.eval_default_iou, |(_, t)| *t)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if !self.augment {
            return AugmentConfig::none();
        }
        AugmentConfig {
            jitter_frac: self.aug_jitter,
            scale_frac: self.aug_scale,
            flip_prob: self.aug_flip,
            shift_max: self.aug_shift,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            templates: self
                .categories
                .iter()
                .zip(&self.mean_sizes)
                .map(|(name, &mean_size)| CategoryTemplate {
                    name: name.clone(),
                    mean_size,
                    size_jitter: self.synth_size_jitter,
                })
                .collect(),
            boxes_per_scene: self.synth_boxes,
            depth_range: (self.synth_depth_min, self.synth_depth_max),
            points_per_box: self.synth_points_per_box,
            clutter_points: self.synth_clutter,
            ground_points: self.synth_ground,
            ..SynthConfig::default()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = epoch.checked_div(self.lr_decay_every).unwrap_or(0);
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.categories.is_empty() {
            return bad("at least one category is required".into());
        }
        if self.mean_sizes.len() != self.categories.len() {
            return bad(format!(
                "{} mean sizes for {} categories",
                self.mean_sizes.len(),
                self.categories.len()
            ));
        }
        if self.mean_sizes.iter().flatten().any(|&s| !(s > 0.0)) {
            return bad("mean sizes must be positive".into());
        }
        if self.yaw_bins == 0 {
            return bad("yaw_bins must be at least 1".into());
        }
        if self.strides.len() != self.heights.len() || self.strides.is_empty() {
            return bad(format!(
                "{} strides and {} heights; need equal, non-empty lists",
                self.strides.len(),
                self.heights.len()
            ));
        }
        crate::geometry::validate_resolutions(&self.resolutions())?;
        if !(self.depth_max > self.depth_min) {
            return bad(format!("empty depth range [{}, {})", self.depth_min, self.depth_max));
        }
        let blocks = self.block_channels.len();
        if blocks < 2 {
            return bad("at least two conv blocks are required".into());
        }
        if self.strides.len() > blocks {
            return bad(format!(
                "{} resolutions but only {blocks} conv blocks",
                self.strides.len()
            ));
        }
        let l = self.seq_len();
        if !l.is_multiple_of(1 << (blocks - 1)) {
            return bad(format!(
                "slab count {l} must be divisible by 2^{} for {blocks} blocks",
                blocks - 1
            ));
        }
        if self.pointnet_widths.len() != 2 || self.block_channels.iter().chain(&self.pointnet_widths).any(|&w| w == 0) {
            return bad("pointnet_widths needs two positive widths and block widths must be positive".into());
        }
        if self.deconv_channels == 0 || self.num_points == 0 || self.refine_points == 0 {
            return bad("deconv_channels, num_points and refine_points must be positive".into());
        }
        let unit = (1usize << (blocks - 1)).max(4);
        if !self.refine_slabs.is_multiple_of(unit) || self.refine_slabs == 0 {
            return bad(format!(
                "refine_slabs {} must be a positive multiple of {unit}",
                self.refine_slabs
            ));
        }
        if !(self.shrink_ratio > 0.0 && self.shrink_ratio <= 1.0) {
            return bad(format!("shrink_ratio {} must be in (0, 1]", self.shrink_ratio));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return bad("focal_alpha must be in [0, 1] and focal_gamma non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} must be in [0, 1)", self.bn_momentum));
        }
        if self.recall_points < 2 {
            return bad("recall_points must be at least 2".into());
        }
        if self
            .eval_iou
            .iter()
            .map(|e| e.1)
            .chain([self.eval_default_iou])
            .any(|t| !(t > 0.0 && t <= 1.0))
        {
            return bad("evaluation IoU thresholds must be in (0, 1]".into());
        }
        if self.refine_expand < 1.0 {
            return bad(format!("refine_expand {} must be at least 1", self.refine_expand));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }
}
