use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// Running statistics of a batchnorm layer, updated in place in train mode.
pub struct BatchNormState<'a> {
    pub running_mean: &'a mut Tensor,
    pub running_var: &'a mut Tensor,
    pub momentum: f32,
    pub eps: f32,
    pub train: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    ConcatChannels(Vec<Var>),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum(Var),
    SumRows(Var),
    ScaleAxis {
        x: Var,
        s: Var,
        axis: usize,
    },
    Column(Var, usize),
    StackColumns(Vec<Var>),
    SuffixSum(Var),
    Index(Var, usize),
    Stack(Vec<Var>),
    SmoothMax {
        x: Var,
        tau: f32,
        weights: Vec<f32>,
    },
    StraightThrough(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. A fresh tape is built for every forward pass;
/// nodes are stored in insertion order, which is also a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free input that collects a gradient (read it back with [`Grads::get`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a stored parameter; gradients flow back into the store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.requires_grad())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x -= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// NCHW input, OIHW weight (I = C_in / groups).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if p.groups == 0 || c_in % p.groups != 0 || c_out % p.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide C_in {c_in} and C_out {c_out}", p.groups),
            ));
        }
        if cin_g * p.groups != c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {} input channels per group, input has {c_in} channels over {} groups",
                    cin_g, p.groups
                ),
            ));
        }
        if h + 2 * p.padding < kh || wd + 2 * p.padding < kw || p.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} does not fit input {h}x{wd} with padding {}", p.padding),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{c_out}]", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride: p.stride,
            pad: p.padding,
            groups: p.groups,
            oh: (h + 2 * p.padding - kh) / p.stride + 1,
            ow: (wd + 2 * p.padding - kw) / p.stride + 1,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new([n, c_out, geom.oh, geom.ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `x [B, I]`, `w [O, I]`, `b [O]` -> `[B, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; bsz * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{o}]", bv.shape())));
            }
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm_f64(
            bsz,
            i,
            o,
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            1.0,
            &mut y,
            o as isize,
            1,
        );
        let out = Tensor::new([bsz, o], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Per-channel batch normalization over `[N, C, H, W]` (or `[N, C]`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: BatchNormState<'_>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {xs:?} has no channel axis")));
        }
        let (n, c) = (xs[0], xs[1]);
        let p: usize = xs[2..].iter().product();
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.value(t).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} {:?}, expected [{c}]", self.value(t).shape()),
                ));
            }
        }
        let m = (n * p) as f32;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f32>, Vec<f32>) = if state.train {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    for &v in &xv[(b * c + ch) * p..][..p] {
                        mean[ch] += v as f64;
                        sq[ch] += (v as f64) * (v as f64);
                    }
                }
            }
            let mean: Vec<f64> = mean.iter().map(|s| s / m as f64).collect();
            let var: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(s, mu)| (s / m as f64 - mu * mu).max(0.0))
                .collect();
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (1.0 - state.momentum) * *rm + state.momentum * mean[ch] as f32;
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (1.0 - state.momentum) * *rv + state.momentum * var[ch] as f32 * unbias;
            }
            (
                mean.iter().map(|&v| v as f32).collect(),
                var.iter().map(|&v| v as f32).collect(),
            )
        } else {
            (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                for i in off..off + p {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(xs, y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: state.train,
            },
            rg,
        ))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < k || xs[3] < k || k == 0 || stride == 0 {
            return Err(Error::shape("avg_pool2d", format!("window {k} on input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xv = self.value(x).data();
        let mut y = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (k * k) as f32;
        for nc in 0..n * c {
            let plane = &xv[nc * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += plane[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    y[(nc * oh + oy) * ow + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new([n, c, oh, ow], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool { x, k, stride }, rg))
    }

    /// `[N, C, H, W]` -> `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let p = xs[2] * xs[3];
        let y: Vec<f32> = self
            .value(x)
            .data()
            .chunks(p)
            .map(|c| c.iter().sum::<f32>() / p as f32)
            .collect();
        let out = Tensor::new([xs[0], xs[1]], y)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?)
            .shape()
            .to_vec();
        let mut c_total = 0;
        for &v in parts {
            let s = self.value(v).shape();
            if s.len() < 2 || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s:?} does not match {first:?} outside the channel axis"),
                ));
            }
            c_total += s[1];
        }
        let n = first[0];
        let p: usize = first[2..].iter().product();
        let mut y = Vec::with_capacity(n * c_total * p);
        for b in 0..n {
            for &v in parts {
                let t = self.value(v);
                let c = t.dim(1);
                y.extend_from_slice(&t.data()[b * c * p..(b + 1) * c * p]);
            }
        }
        let mut shape = first.clone();
        shape[1] = c_total;
        let out = Tensor::new(shape, y)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.dim(0) != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= (row[l].max(f32::MIN_POSITIVE) as f64).ln();
        }
        let out = Tensor::scalar((loss / labels.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column sums of a `[R, C]` matrix -> `[C]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("expected a matrix, got {:?}", t.shape())));
        }
        let cols = t.dim(1);
        let mut y = vec![0.0f32; cols];
        for row in t.data().chunks(cols) {
            y.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(y), Op::SumRows(a), rg))
    }

    /// Multiplies every slice along `axis` of `x` by the matching entry of `s`.
    pub fn scale_axis(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        if axis >= xs.len() || ss != [xs[axis]] {
            return Err(Error::shape(
                "scale_axis",
                format!("scale {ss:?} does not match axis {axis} of {xs:?}"),
            ));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let len = xs[axis];
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let f = sv[i % len];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleAxis { x, s, axis }, rg))
    }

    /// Column `j` of a `[R, C]` matrix -> `[R]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || j >= t.dim(1) {
            return Err(Error::shape("column", format!("column {j} of {:?}", t.shape())));
        }
        let cols = t.dim(1);
        let y: Vec<f32> = t.data().chunks(cols).map(|r| r[j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(y), Op::Column(a, j), rg))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let r = self.value(cols[0]).numel();
        if cols.iter().any(|&c| self.value(c).shape() != [r]) {
            return Err(Error::shape("stack_columns", "columns must be equal-length vectors"));
        }
        let n = cols.len();
        let mut y = vec![0.0; r * n];
        for (j, &c) in cols.iter().enumerate() {
            for (i, &v) in self.value(c).data().iter().enumerate() {
                y[i * n + j] = v;
            }
        }
        let rg = self.rg(cols);
        Ok(self.push(Tensor::new([r, n], y)?, Op::StackColumns(cols.to_vec()), rg))
    }

    /// `[C + 1] -> [C]`, `out[i] = sum_{k > i} a[k]`.
    pub fn suffix_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || t.numel() < 2 {
            return Err(Error::shape("suffix_sum", format!("expected a vector of length >= 2, got {:?}", t.shape())));
        }
        let d = t.data();
        let c = d.len() - 1;
        let mut y = vec![0.0f32; c];
        let mut acc = 0.0f64;
        for i in (0..c).rev() {
            acc += d[i + 1] as f64;
            y[i] = acc as f32;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_vec(y), Op::SuffixSum(a), rg))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.numel() {
            return Err(Error::shape("index", format!("index {i} into {:?}", t.shape())));
        }
        let v = t.data()[i];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i), rg))
    }

    /// Stacks scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() || scalars.iter().any(|&s| !self.value(s).is_scalar()) {
            return Err(Error::shape("stack", "expects one or more scalars"));
        }
        let y: Vec<f32> = scalars.iter().map(|&s| self.value(s).item()).collect();
        let rg = self.rg(scalars);
        Ok(self.push(Tensor::from_vec(y), Op::Stack(scalars.to_vec()), rg))
    }

    /// `sum_i softmax(x / tau)_i * x_i`; `tau` is treated as a constant.
    pub fn smooth_max(&mut self, x: Var, tau: f32) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::shape("smooth_max", format!("expected a vector, got {:?}", t.shape())));
        }
        if !(tau > 0.0) {
            return Err(Error::Invalid(format!("smooth_max temperature must be positive, got {tau}")));
        }
        let (value, weights) = smooth_max_weights(t.data(), tau);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::SmoothMax { x, tau, weights }, rg))
    }

    /// Records a precomputed `value` (typically a quantized copy of `a`) whose
    /// gradient with respect to `a` is the identity.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(a), &value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::StraightThrough(a), rg))
    }

    /// Runs reverse-mode accumulation from a scalar root. Gradients reaching
    /// stored parameters are accumulated into `store`.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward pass".into()));
        }
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::Backward(format!("root must be a scalar, got shape {root_shape:?}")));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Backward("root does not depend on any tensor requiring grad".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_shape));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(t) => t.add_assign(&delta),
                None => grads[v.0] = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, zip_map(g, bv, |g, b| g * b));
                acc(*b, zip_map(g, av, |g, a| g * a));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddScalar(a) | Op::StraightThrough(a) => acc(*a, g.clone()),
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape().to_vec()).unwrap()),
            Op::Relu(a) => acc(*a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = nodes[x.0].requires_grad;
                let need_dw = nodes[w.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), geom, need_dx, need_dw);
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(val(*w).shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b {
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (bsz, i_dim, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if nodes[x.0].requires_grad {
                    // dX[B, I] = dY[B, O] * W[O, I]
                    let mut dx = vec![0.0; bsz * i_dim];
                    kernels::gemm(bsz, o, i_dim, g.data(), o as isize, 1, wv.data(), i_dim as isize, 1, 0.0, &mut dx, i_dim as isize, 1);
                    acc(*x, Tensor::new([bsz, i_dim], dx).unwrap());
                }
                if nodes[w.0].requires_grad {
                    // dW[O, I] = dY^T[O, B] * X[B, I]
                    let mut dw = vec![0.0; o * i_dim];
                    kernels::gemm(o, bsz, i_dim, g.data(), 1, o as isize, xv.data(), i_dim as isize, 1, 0.0, &mut dw, i_dim as isize, 1);
                    acc(*w, Tensor::new([o, i_dim], dw).unwrap());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, Tensor::from_vec(db));
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
                let xs = val(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let p: usize = xs[2..].iter().product();
                let gd = g.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * p;
                        for k in off..off + p {
                            dbeta[ch] += gd[k] as f64;
                            dgamma[ch] += (gd[k] * xhat[k]) as f64;
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let gam = val(*gamma).data();
                    let m = (n * p) as f32;
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * p;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + p {
                                dx[k] = if *train {
                                    scale / m
                                        * (m * gd[k] - dbeta[ch] as f32 - xhat[k] * dgamma[ch] as f32)
                                } else {
                                    scale * gd[k]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(xs.to_vec(), dx).unwrap());
                }
                acc(*gamma, Tensor::from_vec(dgamma.iter().map(|&v| v as f32).collect()));
                acc(*beta, Tensor::from_vec(dbeta.iter().map(|&v| v as f32).collect()));
            }
            Op::AvgPool { x, k, stride } => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (g.dim(2), g.dim(3));
                let inv = 1.0 / (k * k) as f32;
                let mut dx = vec![0.0; val(*x).numel()];
                for (nc, gp) in g.data().chunks(oh * ow).enumerate() {
                    let plane = &mut dx[nc * h * w..][..h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = gp[oy * ow + ox] * inv;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    plane[(oy * stride + ky) * w + ox * stride + kx] += d;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let p = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d / p as f32, p));
                }
                acc(*x, Tensor::new(xs.to_vec(), dx).unwrap());
            }
            Op::ConcatChannels(parts) => {
                let gs = g.shape();
                let n = gs[0];
                let ctot = gs[1];
                let p: usize = gs[2..].iter().product();
                let mut offset = 0;
                for &v in parts {
                    let vs = val(v).shape();
                    let c = vs[1];
                    let mut d = Vec::with_capacity(n * c * p);
                    for b in 0..n {
                        d.extend_from_slice(&g.data()[(b * ctot + offset) * p..][..c * p]);
                    }
                    acc(v, Tensor::new(vs.to_vec(), d).unwrap());
                    offset += c;
                }
            }
            Op::SoftmaxRows(a) => {
                let s = &nodes[i].value;
                let cols = *s.shape().last().unwrap();
                let mut d = vec![0.0; s.numel()];
                for ((drow, srow), grow) in d.chunks_mut(cols).zip(s.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let dot: f32 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for ((dv, &sv), &gv) in drow.iter_mut().zip(srow).zip(grow) {
                        *dv = sv * (gv - dot);
                    }
                }
                acc(*a, Tensor::new(s.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = val(*logits);
                let k = lv.dim(1);
                let scale = g.item() / labels.len() as f32;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::SumRows(a) => {
                let av = val(*a);
                let cols = av.dim(1);
                let mut d = Vec::with_capacity(av.numel());
                for _ in 0..av.dim(0) {
                    d.extend_from_slice(&g.data()[..cols]);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::ScaleAxis { x, s, axis } => {
                let (xv, sv) = (val(*x), val(*s));
                let inner: usize = xv.shape()[axis + 1..].iter().product();
                let len = xv.dim(*axis);
                if nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for (k, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let f = sv.data()[k % len];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*x, dx);
                }
                if nodes[s.0].requires_grad {
                    let mut ds = vec![0.0f64; len];
                    for (k, (gc, xc)) in g.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                        ds[k % len] += gc.iter().zip(xc).map(|(a, b)| (a * b) as f64).sum::<f64>();
                    }
                    acc(*s, Tensor::from_vec(ds.iter().map(|&v| v as f32).collect()));
                }
            }
            Op::Column(a, j) => {
                let av = val(*a);
                let cols = av.dim(1);
                let mut d = vec![0.0; av.numel()];
                for (r, &gv) in g.data().iter().enumerate() {
                    d[r * cols + j] = gv;
                }
                acc(*a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::StackColumns(cols) => {
                let n = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    let d: Vec<f32> = g.data().chunks(n).map(|row| row[j]).collect();
                    acc(c, Tensor::from_vec(d));
                }
            }
            Op::SuffixSum(a) => {
                // d a[k] = sum_{i < k} g[i]
                let len = val(*a).numel();
                let mut d = vec![0.0f32; len];
                let mut run = 0.0f64;
                for k in 1..len {
                    run += g.data()[k - 1] as f64;
                    d[k] = run as f32;
                }
                acc(*a, Tensor::from_vec(d));
            }
            Op::Index(a, idx) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.shape().to_vec());
                d.data_mut()[*idx] = g.item();
                acc(*a, d);
            }
            Op::Stack(scalars) => {
                for (&s, &gv) in scalars.iter().zip(g.data()) {
                    acc(s, Tensor::scalar(gv));
                }
            }
            Op::SmoothMax { x, tau, weights } => {
                let xv = val(*x).data();
                let out = nodes[i].value.item();
                let gi = g.item();
                let d: Vec<f32> = xv
                    .iter()
                    .zip(weights)
                    .map(|(&v, &w)| gi * w * (1.0 + (v - out) / tau))
                    .collect();
                acc(*x, Tensor::from_vec(d));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Softmax weights of `values / tau` and the weighted sum.
pub(crate) fn smooth_max_weights(values: &[f32], tau: f32) -> (f32, Vec<f32>) {
    let m = values.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut w: Vec<f64> = values.iter().map(|&v| (((v - m) / tau) as f64).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let value: f64 = w.iter().zip(values).map(|(w, &v)| w * v as f64).sum();
    let lo = values.iter().fold(f32::INFINITY, |a, &b| a.min(b));
    // rounding in the weighted sum must not leave [min, max]
    ((value as f32).clamp(lo, m), w.iter().map(|&v| v as f32).collect())
}
