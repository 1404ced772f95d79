//! The `fconv` command line.
//!
//! Every command resolves its configuration from a preset, an optional
//! config file and `--set key=value` overrides, prints the resolved config,
//! then runs. Failures print one `error[<kind>]: <message>` line to stderr
//! and exit with the error's code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::eval::{evaluate, EvalConfig, GroundTruth};
use crate::io_data::{
    augment_proposal, list_frames, load_kitti_labels, make_synthetic_scene, read_scene, write_scene, AugmentConfig,
    DatasetPaths,
};
use crate::net::{NetSpec, Network};
use crate::pipeline::{
    export_obj, infer_scene, read_detections, refine_scene, train_first_stage, train_refinement, write_detections,
    PreparedScene,
};
use crate::{Error, Result};

/// Exit code for command-line usage errors.
pub const USAGE_EXIT_CODE: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "fconv",
    version,
    about = "Frustum-sequence convolutional 3D object detection"
)]
pub struct Cli {
    /// Config file of `key = value` lines applied over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// kitti-4block, sunrgbd-5block or desk. Defaults to the config file's
    /// `preset` entry, else kitti-4block.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    First,
    Refine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute category mean sizes from labels and write a config file.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic labeled scenes with proposals.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Jitter proposal centers and scales by up to this fraction of their size.
        #[arg(long, default_value_t = 0.0)]
        proposal_jitter: f64,
    },
    /// Train a network and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "first")]
        stage: Stage,
    },
    /// Run the first stage and write a detection file.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Proposal file; defaults to `<data>/proposals.txt`.
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Refine first-stage detections and write a detection file.
    Refine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of a detection file against the labels.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Also write the key-value results here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a frame's points and boxes as a Wavefront OBJ file.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: String,
        /// Detection file whose boxes for the frame are exported instead of the labels.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn preset_in_file(path: &Path) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().find_map(|l| {
        let l = l.split('#').next()?.trim();
        let (k, v) = l.split_once('=')?;
        (k.trim() == "preset").then(|| v.trim().to_string())
    }))
}

impl Cli {
    /// Preset, config file, `--set` overrides, then `--seed`/`--workers`.
    pub fn resolve_config(&self) -> Result<Config> {
        let preset = match (&self.preset, &self.config) {
            (Some(p), _) => p.clone(),
            (None, Some(f)) => preset_in_file(f)?.unwrap_or_else(|| "kitti-4block".into()),
            (None, None) => "kitti-4block".into(),
        };
        let mut overrides = vec![format!("preset={preset}")];
        overrides.extend(self.set.iter().cloned());
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        Config::resolve(&preset, self.config.as_deref(), &overrides)
    }
}

fn prepared(data: &Path, proposals: Option<&Path>, cfg: &Config) -> Result<Vec<PreparedScene>> {
    let scenes = read_scene(&DatasetPaths::new(data), proposals)?;
    Ok(scenes.iter().map(|s| PreparedScene::new(s, cfg)).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean `(l, w, h)` per category over every label carrying a 3D box.
pub fn category_means(labels: &[crate::io_data::Label]) -> BTreeMap<String, ([f64; 3], usize)> {
    let mut acc: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for l in labels {
        if let Some(b) = l.bbox {
            let e = acc.entry(l.category.clone()).or_insert(([0.0; 3], 0));
            for k in 0..3 {
                e.0[k] += b.sizes[k];
            }
            e.1 += 1;
        }
    }
    for (sum, n) in acc.values_mut() {
        for s in sum.iter_mut() {
            *s /= *n as f64;
        }
    }
    acc
}

fn read_all_labels(paths: &DatasetPaths) -> Result<Vec<(String, Vec<crate::io_data::Label>)>> {
    let mut out = Vec::new();
    for f in list_frames(paths)? {
        let p = paths.labels(&f);
        if p.exists() {
            out.push((f, load_kitti_labels(&p)?));
        }
    }
    Ok(out)
}

/// Runs a parsed command; `print` receives everything meant for stdout.
pub fn execute(cli: &Cli, print: &mut dyn FnMut(&str)) -> Result<()> {
    let mut cfg = cli.resolve_config()?;
    print(&format!("# resolved config\n{}", cfg.render()));
    match &cli.command {
        Command::Prepare { data, out } => {
            let labels: Vec<_> = read_all_labels(&DatasetPaths::new(data))?
                .into_iter()
                .flat_map(|(_, l)| l)
                .collect();
            let means = category_means(&labels);
            for (i, c) in cfg.categories.clone().iter().enumerate() {
                match means.get(c) {
                    Some((m, n)) => {
                        cfg.mean_sizes[i] = *m;
                        print(&format!("{c}: mean size {}x{}x{} over {n} boxes\n", m[0], m[1], m[2]));
                    }
                    None => log::warn!("no labeled {c} boxes; keeping mean size {:?}", cfg.mean_sizes[i]),
                }
            }
            write_text(out, &cfg.render())
        }
        Command::Synth {
            out,
            count,
            proposal_jitter,
        } => {
            let synth = cfg.synth_config();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let jitter = AugmentConfig {
                jitter_frac: *proposal_jitter,
                scale_frac: *proposal_jitter,
                ..AugmentConfig::none()
            };
            let mut scenes = Vec::with_capacity(*count);
            for i in 0..*count {
                let mut s = make_synthetic_scene(&synth, &format!("{i:06}"), &mut rng)?;
                for p in s.proposals.iter_mut() {
                    *p = augment_proposal(p, &mut rng, &jitter);
                }
                scenes.push(s);
            }
            write_scene(&DatasetPaths::new(out), &scenes)?;
            print(&format!("wrote {count} scenes to {}\n", out.display()));
            Ok(())
        }
        Command::Train { data, out, stage } => {
            let scenes = prepared(data, None, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (net, report) = match stage {
                Stage::First => {
                    let mut net = Network::new(NetSpec::from_config(&cfg), &mut rng)?;
                    let r = train_first_stage(&mut net, &scenes, &cfg, &mut rng)?;
                    (net, r)
                }
                Stage::Refine => {
                    let mut net = Network::new(NetSpec::refine_from_config(&cfg), &mut rng)?;
                    let r = train_refinement(&mut net, &scenes, &cfg, &mut rng)?;
                    (net, r)
                }
            };
            for (e, l) in report.epoch_losses.iter().enumerate() {
                print(&format!("epoch {e} loss {l}\n"));
            }
            net.save(out)?;
            print(&format!(
                "trained {} steps; checkpoint {}\n",
                report.steps,
                out.display()
            ));
            Ok(())
        }
        Command::Infer {
            data,
            model,
            out,
            proposals,
        } => {
            let scenes = prepared(data, proposals.as_deref(), &cfg)?;
            let net = Network::from_file(NetSpec::from_config(&cfg), model)?;
            let mut dets = Vec::new();
            for s in &scenes {
                dets.extend(infer_scene(&net, s, &cfg)?);
            }
            write_detections(out, &dets)?;
            print(&format!(
                "{} detections in {} scenes -> {}\n",
                dets.len(),
                scenes.len(),
                out.display()
            ));
            Ok(())
        }
        Command::Refine {
            data,
            model,
            detections,
            out,
        } => {
            let scenes = prepared(data, None, &cfg)?;
            let net = Network::from_file(NetSpec::refine_from_config(&cfg), model)?;
            let first = read_detections(detections)?;
            let mut by_frame: BTreeMap<&str, Vec<_>> = BTreeMap::new();
            for d in &first {
                by_frame.entry(d.frame_id.as_str()).or_default().push(d.clone());
            }
            let mut dets = Vec::new();
            for s in &scenes {
                if let Some(ds) = by_frame.remove(s.frame_id.as_str()) {
                    dets.extend(refine_scene(&net, s, &ds, &cfg)?);
                }
            }
            if let Some(f) = by_frame.keys().next() {
                return Err(Error::Invalid(format!("detections reference unknown frame {f:?}")));
            }
            write_detections(out, &dets)?;
            print(&format!("{} refined detections -> {}\n", dets.len(), out.display()));
            Ok(())
        }
        Command::Eval { data, detections, out } => {
            let gts: Vec<GroundTruth> = read_all_labels(&DatasetPaths::new(data))?
                .iter()
                .flat_map(|(f, l)| GroundTruth::from_labels(f, l))
                .collect();
            let dets = read_detections(detections)?;
            let report = evaluate(&dets, &gts, &EvalConfig::from_config(&cfg))?;
            print(&report.format_text());
            print(&report.format_kv());
            if let Some(o) = out {
                write_text(o, &report.format_kv())?;
            }
            Ok(())
        }
        Command::Export {
            data,
            frame,
            detections,
            out,
        } => {
            let scene = read_scene(&DatasetPaths::new(data), None)?
                .into_iter()
                .find(|s| &s.frame_id == frame)
                .ok_or_else(|| Error::Invalid(format!("no frame {frame:?} in {}", data.display())))?;
            let boxes: Vec<_> = match detections {
                Some(p) => read_detections(p)?
                    .into_iter()
                    .filter(|d| &d.frame_id == frame)
                    .map(|d| d.bbox)
                    .collect(),
                None => scene.labels.iter().flatten().filter_map(|l| l.bbox).collect(),
            };
            write_text(out, &export_obj(&scene.rect_points(), &boxes))?;
            print(&format!("exported {} boxes -> {}\n", boxes.len(), out.display()));
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return USAGE_EXIT_CODE;
        }
    };
    match execute(&cli, &mut |s| print!("{s}")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
