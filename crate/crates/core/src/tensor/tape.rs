use super::{split_axis, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed in training mode (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Pow(Var, f64),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    SmoothL1(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    LogSoftmax(Var),
    MaxAxis(Var, usize, Vec<usize>),
    SegmentMax(Var, Vec<Option<usize>>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Deconv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every op appends a node holding its forward value; [`Tape::backward`]
/// walks the nodes in reverse and accumulates exact first-order gradients.
/// Constants (created with [`Tape::constant`]) and anything computed only from
/// constants receive no gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("zip shape");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("map shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip(a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(&b).map(|(v, bb)| v + bb).collect::<Vec<_>>())
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `x^e` for non-negative `x`; where the derivative is unbounded at 0 it is taken as 0.
    pub fn pow(&mut self, a: Var, e: f64) -> Var {
        self.map(a, move |x| x.powf(e), Op::Pow(a, e))
    }

    /// Square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    /// Elementwise Huber / smooth-L1 with threshold `delta`:
    /// `0.5 x² / delta` for `|x| < delta`, `|x| - 0.5 delta` otherwise.
    pub fn smooth_l1(&mut self, a: Var, delta: f64) -> Var {
        self.map(
            a,
            move |x| {
                let ax = x.abs();
                if ax < delta {
                    0.5 * x * x / delta
                } else {
                    ax - 0.5 * delta
                }
            },
            Op::SmoothL1(a, delta),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of range for {n} elements"
            )));
        }
        let d = self.data(a);
        let data = indices.iter().map(|&i| d[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![indices.len()], data)?,
            Op::Gather(a, indices.to_vec()),
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice(a, axis, start), rg))
    }

    fn last_axis_rows(&self, a: Var) -> usize {
        *self.shape(a).last().unwrap_or(&1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let c = self.last_axis_rows(a).max(1);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("softmax shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let c = self.last_axis_rows(a).max(1);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("log_softmax shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Maximum over `axis` (lowest index wins ties) and the argmax positions.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("max over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(a);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut bi = 0;
                for k in 1..len {
                    let v = d[(o * len + k) * inner + i];
                    if v > best {
                        best = v;
                        bi = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[a]);
        let v = self.push(Tensor::new(new_shape, out)?, Op::MaxAxis(a, axis, arg.clone()), rg);
        Ok((v, arg))
    }

    /// Row-wise max over contiguous row segments of a `[rows, channels]`
    /// tensor. `offsets` has one more entry than there are segments; segment
    /// `s` spans rows `offsets[s]..offsets[s + 1]`. Empty segments yield zeros.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || offsets.is_empty() || *offsets.last().unwrap() != shape[0] {
            return Err(Error::Shape(format!(
                "segment_max: offsets ending at {:?} do not cover {shape:?}",
                offsets.last()
            )));
        }
        let c = shape[1];
        let segs = offsets.len() - 1;
        let d = self.data(a);
        let mut out = vec![0.0; segs * c];
        let mut arg = vec![None; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi < lo {
                return Err(Error::Shape("segment_max: offsets must be non-decreasing".into()));
            }
            if hi == lo {
                continue;
            }
            for ch in 0..c {
                let mut best = d[lo * c + ch];
                let mut bi = lo;
                for r in lo + 1..hi {
                    let v = d[r * c + ch];
                    if v > best {
                        best = v;
                        bi = r;
                    }
                }
                out[s * c + ch] = best;
                arg[s * c + ch] = Some(bi);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![segs, c], out)?, Op::SegmentMax(a, arg), rg))
    }

    /// Batch normalization over every axis but the last.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BnStats>)> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batchnorm", self.shape(x), self.shape(gamma)));
        }
        let d = self.data(x);
        let rows = d.len().checked_div(c).unwrap_or(0);
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                if rows > 0 {
                    for row in d.chunks(c) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= rows as f64);
                    for row in d.chunks(c) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= rows as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "batchnorm: running stats of length {} for {c} channels",
                        mean.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(d.len());
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(c.max(1)) {
            for ch in 0..row.len() {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        let stats = (train && rows > 0).then_some(BnStats { mean, var, count: rows });
        Ok((v, stats))
    }

    /// Strided 1D convolution over `[batch, length, in]` with weights
    /// `[kernel, in, out]`; output length `(length + 2 pad - kernel) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        if len + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv1d: kernel {k} longer than padded input {len}+2*{padding}"
            )));
        }
        let lout = (len + 2 * padding - k) / stride + 1;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; bsz * lout * cout];
        for b in 0..bsz {
            for t in 0..lout {
                let orow = &mut out[(b * lout + t) * cout..(b * lout + t + 1) * cout];
                for kk in 0..k {
                    let pos = (t * stride + kk) as isize - padding as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let xrow = &xd[(b * len + pos as usize) * cin..(b * len + pos as usize + 1) * cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![bsz, lout, cout], out)?,
            Op::Conv1d { x, w, stride, padding },
            rg,
        ))
    }

    /// Transposed 1D convolution; output length
    /// `(length - 1) * stride + kernel - 2 pad`.
    pub fn deconv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(shape_err("deconv1d", &sx, &sw));
        }
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let full = if len == 0 { 0 } else { (len - 1) * stride + k };
        if full < 2 * padding {
            return Err(Error::Shape(format!("deconv1d: padding {padding} too large")));
        }
        let lout = full - 2 * padding;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; bsz * lout * cout];
        for b in 0..bsz {
            for i in 0..len {
                let xrow = &xd[(b * len + i) * cin..(b * len + i + 1) * cin];
                for kk in 0..k {
                    let pos = (i * stride + kk) as isize - padding as isize;
                    if pos < 0 || pos as usize >= lout {
                        continue;
                    }
                    let orow = &mut out[(b * lout + pos as usize) * cout..(b * lout + pos as usize + 1) * cout];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![bsz, lout, cout], out)?,
            Op::Deconv1d { x, w, stride, padding },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let take_b: Vec<bool> = ad.iter().zip(bd).map(|(x, y)| y < x).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if !take_b[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        if take_b[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                let c = self.nodes[b.0].value.numel();
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Log(a) => self.unary(*a, out, g, grads, |x, _| 1.0 / x),
            Op::Exp(a) => self.unary(*a, out, g, grads, |_, y| y),
            Op::Abs(a) => self.unary(*a, out, g, grads, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Square(a) => self.unary(*a, out, g, grads, |x, _| 2.0 * x),
            Op::Pow(a, e) => {
                let e = *e;
                self.unary(*a, out, g, grads, move |x, _| {
                    if x == 0.0 && e < 1.0 {
                        0.0
                    } else {
                        e * x.powf(e - 1.0)
                    }
                })
            }
            Op::Sqrt(a) => self.unary(*a, out, g, grads, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }),
            Op::Sin(a) => self.unary(*a, out, g, grads, |x, _| x.cos()),
            Op::Cos(a) => self.unary(*a, out, g, grads, |x, _| -x.sin()),
            Op::SmoothL1(a, delta) => {
                let d = *delta;
                self.unary(
                    *a,
                    out,
                    g,
                    grads,
                    move |x, _| if x.abs() < d { x / d } else { x.signum() },
                )
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                ga[(o * len + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (gi, &i) in g.iter().zip(idx) {
                        ga[i] += gi;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, alen, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        for (d, s) in ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = self.shape(*a).last().copied().unwrap_or(1).max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = self.shape(*a).last().copied().unwrap_or(1).max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dst) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dst[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::MaxAxis(a, axis, arg) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = arg[o * inner + i];
                            ga[(o * len + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SegmentMax(a, arg) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, r) in arg.iter().enumerate() {
                        if let Some(r) = r {
                            ga[r * c + j % c] += g[j];
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let gd = self.data(*gamma);
                let rows = g.len().checked_div(c).unwrap_or(0);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let gv = g[r * c + ch];
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xhat[r * c + ch];
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            let scale = gd[ch] * inv_std[ch];
                            gx[i] += if *train {
                                scale * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let x_rg = self.nodes[x.0].requires_grad;
                let w_rg = self.nodes[w.0].requires_grad;
                let mut gx = vec![0.0; if x_rg { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if w_rg { wd.len() } else { 0 }];
                for b in 0..bsz {
                    for t in 0..lout {
                        let grow = &g[(b * lout + t) * cout..(b * lout + t + 1) * cout];
                        for kk in 0..k {
                            let pos = (t * stride + kk) as isize - *padding as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let xi = (b * len + pos as usize) * cin;
                            for ci in 0..cin {
                                let wi = (kk * cin + ci) * cout;
                                let wrow = &wd[wi..wi + cout];
                                if x_rg {
                                    gx[xi + ci] += grow.iter().zip(wrow).map(|(p, q)| p * q).sum::<f64>();
                                }
                                if w_rg {
                                    let xv = xd[xi + ci];
                                    if xv != 0.0 {
                                        for (dst, &gv) in gw[wi..wi + cout].iter_mut().zip(grow) {
                                            *dst += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.merge(grads, *x, gx);
                self.merge(grads, *w, gw);
            }
            Op::Deconv1d { x, w, stride, padding } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let lout = node.value.shape()[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let x_rg = self.nodes[x.0].requires_grad;
                let w_rg = self.nodes[w.0].requires_grad;
                let mut gx = vec![0.0; if x_rg { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if w_rg { wd.len() } else { 0 }];
                for b in 0..bsz {
                    for i in 0..len {
                        let xi = (b * len + i) * cin;
                        for kk in 0..k {
                            let pos = (i * stride + kk) as isize - *padding as isize;
                            if pos < 0 || pos as usize >= lout {
                                continue;
                            }
                            let grow = &g[(b * lout + pos as usize) * cout..(b * lout + pos as usize + 1) * cout];
                            for ci in 0..cin {
                                let wi = (kk * cin + ci) * cout;
                                if x_rg {
                                    gx[xi + ci] += grow.iter().zip(&wd[wi..wi + cout]).map(|(p, q)| p * q).sum::<f64>();
                                }
                                if w_rg {
                                    let xv = xd[xi + ci];
                                    if xv != 0.0 {
                                        for (dst, &gv) in gw[wi..wi + cout].iter_mut().zip(grow) {
                                            *dst += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.merge(grads, *x, gx);
                self.merge(grads, *w, gw);
            }
        }
    }

    fn merge(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if g.is_empty() {
            return;
        }
        if let Some(dst) = self.acc(grads, v) {
            dst.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }

    fn unary(&self, a: Var, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64, f64) -> f64) {
        let ad = self.data(a);
        let local: Vec<f64> = (0..g.len()).map(|i| g[i] * d(ad[i], out[i])).collect();
        if let Some(ga) = self.acc(grads, a) {
            ga.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
        }
    }
}
