//! PointNet streams, the frustum-sequence FCN and the detection header.
//!
//! Every resolution `r` has its own PointNet (three shared linear layers with
//! batch norm and ReLU, then a max over the points of each slab) producing a
//! `L/2^r x d_r` map. The FCN runs conv blocks over the finest map; block 1
//! keeps the length, every later block halves it with a stride-2 conv
//! followed by a stride-1 conv. After block `b >= 2` the map of resolution
//! `b - 1` (when present) is concatenated and squeezed back by a 1-wide merge
//! conv. Each block from 2 on is upsampled to `L/2` by a transposed conv; the
//! concatenation of these is the fused map fed to two parallel 1-wide convs:
//! class logits `K + 1` and box offsets `K * N * 7`, laid out category-major,
//! then yaw bin, then `(dx, dy, dz, dl, dw, dh, dtheta)`.
//!
//! All sequence tensors are channel-last `[batch, length, channels]`.

mod params;

pub use params::ParamStore;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::geometry::FrustumSequence;
use crate::tensor::{BnMode, BnStats, Tape, Tensor, Var};
use crate::{Error, Result};

/// Prior foreground probability the class bias is initialized to.
const FG_PRIOR: f64 = 0.01;

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    /// Input channels per point (3 coordinates, optionally intensity).
    pub point_channels: usize,
    pub pointnet_hidden: [usize; 2],
    /// Output width of each conv block; `block_channels[r]` is also the
    /// PointNet width of resolution `r`.
    pub block_channels: Vec<usize>,
    /// Number of input resolutions (at most the number of blocks).
    pub resolutions: usize,
    pub deconv_channels: usize,
    pub categories: usize,
    pub bins: usize,
    /// Slab count `L` of the finest input sequence.
    pub seq_len: usize,
}

impl NetSpec {
    /// First-stage network described by `cfg`.
    pub fn from_config(cfg: &Config) -> Self {
        NetSpec {
            point_channels: cfg.point_channels(),
            pointnet_hidden: [cfg.pointnet_widths[0], cfg.pointnet_widths[1]],
            block_channels: cfg.block_channels.clone(),
            resolutions: cfg.strides.len(),
            deconv_channels: cfg.deconv_channels,
            categories: cfg.categories.len(),
            bins: cfg.yaw_bins,
            seq_len: cfg.seq_len(),
        }
    }

    /// Refinement network: same layer widths, `refine_slabs` input slabs and a
    /// single yaw bin.
    pub fn refine_from_config(cfg: &Config) -> Self {
        NetSpec {
            bins: 1,
            seq_len: cfg.refine_slabs,
            ..NetSpec::from_config(cfg)
        }
    }

    pub fn blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// Length `L~` of the header output.
    pub fn header_len(&self) -> usize {
        self.seq_len / 2
    }

    pub fn level_len(&self, r: usize) -> usize {
        self.seq_len >> r
    }

    pub fn fused_channels(&self) -> usize {
        (self.blocks() - 1) * self.deconv_channels
    }

    pub fn reg_channels(&self) -> usize {
        self.categories * self.bins * 7
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.blocks();
        if b < 2 || self.resolutions == 0 || self.resolutions > b {
            return Err(Error::Config(format!(
                "{} blocks with {} resolutions: need at least 2 blocks and 1..=blocks resolutions",
                b, self.resolutions
            )));
        }
        if self.seq_len == 0 || !self.seq_len.is_multiple_of(1 << (b - 1)) {
            return Err(Error::Config(format!(
                "sequence length {} is not a positive multiple of 2^{}",
                self.seq_len,
                b - 1
            )));
        }
        if self.categories == 0 || self.bins == 0 {
            return Err(Error::Config(
                "network needs at least one category and one yaw bin".into(),
            ));
        }
        Ok(())
    }
}

/// Slab-grouped input rows of one resolution for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInput {
    /// Row-major `[rows, channels]` relative point coordinates.
    pub rows: Vec<f64>,
    /// Slab `t` owns rows `offsets[t]..offsets[t + 1]`.
    pub offsets: Vec<usize>,
    pub channels: usize,
}

impl LevelInput {
    /// Rows are the slab members relative to the slab centroid, with the
    /// point's intensity appended when given.
    pub fn from_sequence(seq: &FrustumSequence, intensities: Option<&[f64]>) -> Self {
        let channels = 3 + usize::from(intensities.is_some());
        let mut rows = Vec::new();
        let mut offsets = Vec::with_capacity(seq.len() + 1);
        offsets.push(0);
        for t in 0..seq.len() {
            for (&i, rel) in seq.groups[t].iter().zip(seq.relative_points(t)) {
                rows.extend_from_slice(&rel);
                if let Some(int) = intensities {
                    rows.push(int[i]);
                }
            }
            offsets.push(rows.len() / channels);
        }
        LevelInput {
            rows,
            offsets,
            channels,
        }
    }

    pub fn slabs(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Network input for one proposal: one entry per resolution, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub levels: Vec<LevelInput>,
}

impl SampleInput {
    pub fn from_sequences(seqs: &[FrustumSequence], intensities: Option<&[f64]>) -> Self {
        SampleInput {
            levels: seqs.iter().map(|s| LevelInput::from_sequence(s, intensities)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values recorded by one forward pass.
pub struct ForwardOutput {
    /// `[batch, L~, K + 1]`.
    pub cls_logits: Var,
    /// `[batch, L~, K * N * 7]`.
    pub reg: Var,
    /// Per-sample shapes of the named intermediate maps, in evaluation order.
    pub shapes: Vec<(String, Vec<usize>)>,
    /// Batch statistics of every batch-norm layer (train mode only).
    pub bn_stats: Vec<(String, BnStats)>,
}

/// Weights plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: ParamStore,
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

fn add_bn(params: &mut ParamStore, layer: &str, c: usize) {
    params.add(format!("{layer}.bn.gamma"), Tensor::full(&[c], 1.0), true);
    params.add(format!("{layer}.bn.beta"), Tensor::zeros(&[c]), true);
    params.add(format!("{layer}.bn.mean"), Tensor::zeros(&[c]), false);
    params.add(format!("{layer}.bn.var"), Tensor::full(&[c], 1.0), false);
}

fn strip_batch(shape: &[usize]) -> Vec<usize> {
    shape[1..].to_vec()
}

impl Network {
    /// Randomly initialized network: He-normal weights, unit batch norm,
    /// class biases set to a small foreground prior.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new();
        let d = &spec.block_channels;
        for r in 0..spec.resolutions {
            let widths = [
                spec.point_channels,
                spec.pointnet_hidden[0],
                spec.pointnet_hidden[1],
                d[r],
            ];
            for i in 0..3 {
                let layer = format!("pointnet{r}.fc{i}");
                p.add(
                    format!("{layer}.w"),
                    he_normal(&[widths[i], widths[i + 1]], widths[i], rng),
                    true,
                );
                add_bn(&mut p, &layer, widths[i + 1]);
            }
        }
        for b in 1..=spec.blocks() {
            let out = d[b - 1];
            let convs: Vec<(usize, usize)> = if b == 1 {
                vec![(d[0], out)]
            } else {
                vec![(d[b - 2], out), (out, out)]
            };
            for (j, (cin, cout)) in convs.into_iter().enumerate() {
                let layer = format!("block{b}.conv{j}");
                p.add(format!("{layer}.w"), he_normal(&[3, cin, cout], 3 * cin, rng), true);
                add_bn(&mut p, &layer, cout);
            }
            if b >= 2 && b - 1 < spec.resolutions {
                let layer = format!("merge{b}");
                p.add(format!("{layer}.w"), he_normal(&[1, 2 * out, out], 2 * out, rng), true);
                add_bn(&mut p, &layer, out);
            }
            if b >= 2 {
                let k = 1 << (b - 2);
                let layer = format!("deconv{b}");
                p.add(
                    format!("{layer}.w"),
                    he_normal(&[k, out, spec.deconv_channels], out, rng),
                    true,
                );
                add_bn(&mut p, &layer, spec.deconv_channels);
            }
        }
        let fused = spec.fused_channels();
        let small = Normal::new(0.0, 0.01).expect("valid std");
        let k1 = spec.categories + 1;
        p.add(
            "header.cls.w",
            Tensor::from_fn(&[1, fused, k1], |_| small.sample(rng)),
            true,
        );
        let fg_bias = -((1.0 - FG_PRIOR) / FG_PRIOR).ln();
        p.add(
            "header.cls.b",
            Tensor::from_fn(&[k1], |i| if i == 0 { 0.0 } else { fg_bias }),
            true,
        );
        let rc = spec.reg_channels();
        p.add(
            "header.reg.w",
            Tensor::from_fn(&[1, fused, rc], |_| small.sample(rng)),
            true,
        );
        p.add("header.reg.b", Tensor::zeros(&[rc]), true);
        Ok(Network { spec, params: p })
    }

    fn id(&self, name: &str) -> Result<usize> {
        self.params
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    fn bn_relu(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        layer: &str,
        mode: Mode,
        stats: &mut Vec<(String, BnStats)>,
    ) -> Result<Var> {
        let g = vars[self.id(&format!("{layer}.bn.gamma"))?];
        let b = vars[self.id(&format!("{layer}.bn.beta"))?];
        let (y, st) = match mode {
            Mode::Train => tape.batchnorm(x, g, b, BnMode::Train)?,
            Mode::Eval => {
                let mean = self.params.tensor(self.id(&format!("{layer}.bn.mean"))?).data();
                let var = self.params.tensor(self.id(&format!("{layer}.bn.var"))?).data();
                tape.batchnorm(x, g, b, BnMode::Eval { mean, var })?
            }
        };
        if let Some(st) = st {
            stats.push((layer.to_string(), st));
        }
        Ok(tape.relu(y))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        layer: &str,
        stride: usize,
        padding: usize,
        mode: Mode,
        stats: &mut Vec<(String, BnStats)>,
    ) -> Result<Var> {
        let w = vars[self.id(&format!("{layer}.w"))?];
        let y = tape.conv1d(x, w, stride, padding)?;
        self.bn_relu(tape, vars, y, layer, mode, stats)
    }

    /// PointNet map of resolution `r` for the whole batch: `[batch, L_r, d_r]`.
    fn pointnet(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        inputs: &[SampleInput],
        r: usize,
        mode: Mode,
        stats: &mut Vec<(String, BnStats)>,
    ) -> Result<Var> {
        let len = self.spec.level_len(r);
        let c = self.spec.point_channels;
        let mut rows = Vec::new();
        let mut offsets = vec![0];
        for (si, s) in inputs.iter().enumerate() {
            let lvl = s
                .levels
                .get(r)
                .ok_or_else(|| Error::Shape(format!("sample {si} has no resolution {r}")))?;
            if lvl.slabs() != len || lvl.channels != c {
                return Err(Error::Shape(format!(
                    "sample {si} resolution {r}: {} slabs x {} channels, network expects {len} x {c}",
                    lvl.slabs(),
                    lvl.channels
                )));
            }
            let base = rows.len() / c;
            rows.extend_from_slice(&lvl.rows);
            offsets.extend(lvl.offsets[1..].iter().map(|o| o + base));
        }
        let n = rows.len() / c;
        let mut x = tape.constant(Tensor::new(vec![n, c], rows)?);
        for i in 0..3 {
            let layer = format!("pointnet{r}.fc{i}");
            let w = vars[self.id(&format!("{layer}.w"))?];
            let y = tape.matmul(x, w)?;
            x = self.bn_relu(tape, vars, y, &layer, mode, stats)?;
        }
        let pooled = tape.segment_max(x, &offsets)?;
        tape.reshape(pooled, &[inputs.len(), len, self.spec.block_channels[r]])
    }

    /// Runs the network on a batch. `vars` are the parameters bound to `tape`
    /// (see [`ParamStore::bind`]).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[SampleInput], mode: Mode) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} bound parameters for a network with {}",
                vars.len(),
                self.params.len()
            )));
        }
        let spec = &self.spec;
        let mut shapes = Vec::new();
        let mut stats = Vec::new();
        let mut maps = Vec::with_capacity(spec.resolutions);
        for r in 0..spec.resolutions {
            let m = self.pointnet(tape, vars, inputs, r, mode, &mut stats)?;
            shapes.push((format!("pointnet{r}"), strip_batch(tape.shape(m))));
            maps.push(m);
        }

        let mut x = maps[0];
        let mut ups = Vec::new();
        for b in 1..=spec.blocks() {
            if b == 1 {
                x = self.conv_bn_relu(tape, vars, x, "block1.conv0", 1, 1, mode, &mut stats)?;
            } else {
                x = self.conv_bn_relu(tape, vars, x, &format!("block{b}.conv0"), 2, 1, mode, &mut stats)?;
                x = self.conv_bn_relu(tape, vars, x, &format!("block{b}.conv1"), 1, 1, mode, &mut stats)?;
            }
            shapes.push((format!("block{b}"), strip_batch(tape.shape(x))));
            if b >= 2 && b - 1 < spec.resolutions {
                let cat = tape.concat(&[x, maps[b - 1]], 2)?;
                shapes.push((format!("concat{b}"), strip_batch(tape.shape(cat))));
                x = self.conv_bn_relu(tape, vars, cat, &format!("merge{b}"), 1, 0, mode, &mut stats)?;
                shapes.push((format!("merge{b}"), strip_batch(tape.shape(x))));
            }
            if b >= 2 {
                let layer = format!("deconv{b}");
                let w = vars[self.id(&format!("{layer}.w"))?];
                let k = 1 << (b - 2);
                let y = tape.deconv1d(x, w, k, 0)?;
                let y = self.bn_relu(tape, vars, y, &layer, mode, &mut stats)?;
                shapes.push((layer, strip_batch(tape.shape(y))));
                ups.push(y);
            }
        }
        let fused = tape.concat(&ups, 2)?;
        shapes.push(("fused".into(), strip_batch(tape.shape(fused))));

        let cls = tape.conv1d(fused, vars[self.id("header.cls.w")?], 1, 0)?;
        let cls = tape.add_bias(cls, vars[self.id("header.cls.b")?])?;
        shapes.push(("cls".into(), strip_batch(tape.shape(cls))));
        let reg = tape.conv1d(fused, vars[self.id("header.reg.w")?], 1, 0)?;
        let reg = tape.add_bias(reg, vars[self.id("header.reg.b")?])?;
        shapes.push(("reg".into(), strip_batch(tape.shape(reg))));
        Ok(ForwardOutput {
            cls_logits: cls,
            reg,
            shapes,
            bn_stats: stats,
        })
    }

    /// Blends batch statistics into the running statistics:
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BnStats)], momentum: f64) -> Result<()> {
        for (layer, st) in stats {
            let mi = self.id(&format!("{layer}.bn.mean"))?;
            let vi = self.id(&format!("{layer}.bn.var"))?;
            let unbias = if st.count > 1 {
                st.count as f64 / (st.count - 1) as f64
            } else {
                1.0
            };
            for (r, b) in self.params.tensor_mut(mi).data_mut().iter_mut().zip(&st.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.params.tensor_mut(vi).data_mut().iter_mut().zip(&st.var) {
                *r = momentum * *r + (1.0 - momentum) * b * unbias;
            }
        }
        Ok(())
    }

    /// Eval-mode forward returning class probabilities `[batch, L~, K + 1]`
    /// and offsets `[batch, L~, K * N * 7]`.
    pub fn predict(&self, inputs: &[SampleInput]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, inputs, Mode::Eval)?;
        let probs = tape.softmax(out.cls_logits);
        Ok((tape.value(probs).clone(), tape.value(out.reg).clone()))
    }

    /// Eval-mode PointNet feature map `[L_r, d_r]` of resolution `r`.
    pub fn feature_map(&self, input: &SampleInput, r: usize) -> Result<Tensor> {
        if r >= self.spec.resolutions {
            return Err(Error::Shape(format!(
                "resolution {r} requested from a network with {}",
                self.spec.resolutions
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let m = self.pointnet(
            &mut tape,
            &vars,
            std::slice::from_ref(input),
            r,
            Mode::Eval,
            &mut Vec::new(),
        )?;
        let shape = strip_batch(tape.shape(m));
        tape.value(m).clone().reshape(&shape)
    }

    /// Per-sample shapes of every named intermediate map for `inputs`.
    pub fn shape_ledger(&self, inputs: &[SampleInput]) -> Result<Vec<(String, Vec<usize>)>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        Ok(self.forward(&mut tape, &vars, inputs, Mode::Eval)?.shapes)
    }

    /// Network of architecture `spec` with weights read from a checkpoint.
    pub fn from_file(spec: NetSpec, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut net = Network::new(
            spec,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        net.load(path)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.params.save(std::io::BufWriter::new(f))
    }

    pub fn load(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        self.params.load(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{multi_resolution_sequences_local, FrustumFrame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetSpec {
        NetSpec {
            point_channels: 3,
            pointnet_hidden: [4, 6],
            block_channels: vec![8, 8, 12],
            resolutions: 3,
            deconv_channels: 5,
            categories: 2,
            bins: 3,
            seq_len: 16,
        }
    }

    fn tiny_input(seed: u64, spec: &NetSpec) -> SampleInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..8.0),
                ]
            })
            .collect();
        let res: Vec<_> = (0..spec.resolutions)
            .map(|r| crate::geometry::Resolution::new(0.5 * (1 << r) as f64, 1.0 * (1 << r) as f64))
            .collect();
        let seqs = multi_resolution_sequences_local(&pts, &FrustumFrame::identity(), &res, 0.0, 8.0).unwrap();
        SampleInput::from_sequences(&seqs, None)
    }

    #[test]
    fn tiny_shapes() {
        let spec = tiny_spec();
        let net = Network::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ledger = net.shape_ledger(&[tiny_input(2, &spec)]).unwrap();
        let get = |n: &str| ledger.iter().find(|e| e.0 == n).unwrap().1.clone();
        assert_eq!(get("pointnet0"), vec![16, 8]);
        assert_eq!(get("pointnet2"), vec![4, 12]);
        assert_eq!(get("block3"), vec![4, 12]);
        assert_eq!(get("deconv2"), vec![8, 5]);
        assert_eq!(get("deconv3"), vec![8, 5]);
        assert_eq!(get("fused"), vec![8, 10]);
        assert_eq!(get("cls"), vec![8, 3]);
        assert_eq!(get("reg"), vec![8, 42]);
    }

    #[test]
    fn zero_header_gives_uniform_softmax() {
        let spec = tiny_spec();
        let mut net = Network::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for name in ["header.cls.w", "header.cls.b"] {
            let i = net.params.id(name).unwrap();
            net.params.tensor_mut(i).data_mut().fill(0.0);
        }
        let (p, _) = net.predict(&[tiny_input(4, &spec)]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn running_stats_update() {
        let spec = tiny_spec();
        let mut net = Network::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape, true);
        let out = net
            .forward(
                &mut tape,
                &vars,
                &[tiny_input(6, &spec), tiny_input(7, &spec)],
                Mode::Train,
            )
            .unwrap();
        let (layer, st) = out.bn_stats.iter().find(|s| s.0 == "block1.conv0").unwrap().clone();
        net.update_running_stats(&out.bn_stats, 0.9).unwrap();
        let m = net.params.get(&format!("{layer}.bn.mean")).unwrap().data()[0];
        assert!((m - 0.1 * st.mean[0]).abs() < 1e-15);
        let v = net.params.get(&format!("{layer}.bn.var")).unwrap().data()[0];
        let n = st.count as f64;
        assert!((v - (0.9 + 0.1 * st.var[0] * n / (n - 1.0))).abs() < 1e-12);
    }

    #[test]
    fn wrong_level_length_is_a_shape_error() {
        let spec = tiny_spec();
        let net = Network::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut input = tiny_input(9, &spec);
        input.levels[1] = input.levels[0].clone();
        assert!(matches!(net.predict(&[input]), Err(Error::Shape(_))));
    }
}
