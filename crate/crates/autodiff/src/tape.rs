//! Reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node. Nodes whose inputs
//! carry no gradient are stored as plain values, so inference through a
//! tape costs no more memory than the activations themselves.

use std::collections::HashMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::Parameter;
use crate::tensor::{softmax_row, Tensor};

/// Probabilities are clamped to this floor before any logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LogClamped(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
        mode: UpsampleMode,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    WithValue(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<String, Tensor>,
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    /// Gradient of a grad-requiring leaf created by [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var.0)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.by_param.keys().map(String::as_str)
    }

    /// Adds the stored gradients onto the matching trainable parameters.
    pub fn accumulate_into(&self, params: &mut [Parameter]) {
        for p in params.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = self.by_param.get(&p.name) {
                match &mut p.grad {
                    Some(existing) => existing.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// An unnamed leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Binds a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if p.trainable {
            self.leaf(p.tensor.clone(), true, Some(p.name.clone()))
        } else {
            self.constant(p.tensor.clone())
        }
    }

    /// Binds a parameter as a constant regardless of its trainable flag.
    pub fn frozen(&mut self, p: &Parameter) -> Var {
        self.constant(p.tensor.clone())
    }

    fn check_nonempty(&self, v: Var, op: &'static str) -> Result<()> {
        if self.nodes[v.0].value.is_empty() {
            return Err(AutodiffError::Empty { op });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        self.check_nonempty(x, name)?;
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`M` bias to every row of an `(N, M)` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return shape_err("add_bias", format!("{sx:?} + {sb:?}"));
        }
        let cols = sx[1];
        let mut value = self.value(x).clone();
        let bias = self.value(b).data();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        self.push(value, Op::AddBias(x, b), &[x, b])
    }

    /// `x·W + b` with `W` stored as `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Shift(x), "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x), "abs")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    /// `ln(max(x, LOG_CLAMP))`; zero gradient below the clamp.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::LogClamped(x), "log")
    }

    fn rowwise(&mut self, x: Var, name: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        self.check_nonempty(x, name)?;
        let src = self.value(x);
        let k = *src.shape().last().expect("non-empty shape");
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.data().chunks(k).zip(out.chunks_mut(k)) {
            f(row, dst);
        }
        Tensor::new(src.shape(), out)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.rowwise(x, "softmax", softmax_row)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.rowwise(x, "log_softmax", |row, dst| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        })?;
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty(x, "sum")?;
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty(x, "mean")?;
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean over the leading (batch) dimension.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check_nonempty(x, "mean_rows")?;
        let t = self.value(x);
        let (rows, cols) = t.rows_cols();
        let mut acc = vec![0.0; cols];
        for row in t.data().chunks(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= rows as f64;
        }
        let shape = if t.ndim() == 1 { vec![1] } else { t.shape()[1..].to_vec() };
        let value = Tensor::new(&shape, acc)?;
        self.push(value, Op::MeanRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        self.reshape(x, &[rows, cols])
    }

    /// Stride-1 convolution of an NCHW batch with `(O, C, KH, KW)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 {
            return shape_err("conv2d", format!("input must be NCHW, got {sx:?}"));
        }
        if sw.len() != 4 || sw[1] != sx[1] {
            return shape_err("conv2d", format!("weight {sw:?} incompatible with input {sx:?}"));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}"));
        }
        let out_ch = sw[0];
        if let Some(b) = b {
            if self.value(b).shape() != [out_ch] {
                return shape_err("conv2d", format!("bias {:?} for {out_ch} channels", self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            pad,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let (kk, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; out_ch * ncols];
        kernels::gemm(out_ch, kk, ncols, self.value(w).data(), false, &cols, false, &mut out, false);
        let plane = geom.out_h() * geom.out_w();
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(ncols).enumerate() {
                for v in chunk {
                    *v += bias[o];
                }
            }
        }
        let data = kernels::channel_major_to_batch(&out, geom.batch, out_ch, plane);
        let value = Tensor::new(&[geom.batch, out_ch, geom.out_h(), geom.out_w()], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom, out_ch }, &inputs)
    }

    /// 2×2 max pooling with stride 2; ties keep the first element.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return shape_err("max_pool2", format!("need NCHW with even H, W, got {s:?}"));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..s[0] * s[1] {
            let base = nc * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * s[3] + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * s[3] + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.push(value, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// ×2 spatial upsampling of an NCHW batch.
    pub fn upsample2(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return shape_err("upsample2", format!("need NCHW, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        match mode {
            UpsampleMode::Nearest => {
                for (plane_in, plane_out) in src.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
                    for y in 0..oh {
                        for x_ in 0..ow {
                            plane_out[y * ow + x_] = plane_in[(y / 2) * w + x_ / 2];
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let (ty, tx) = (kernels::bilinear_taps(oh, h), kernels::bilinear_taps(ow, w));
                for (plane_in, plane_out) in src.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
                    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (x_, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let top = plane_in[y0 * w + x0] * (1.0 - lx) + plane_in[y0 * w + x1] * lx;
                            let bot = plane_in[y1 * w + x0] * (1.0 - lx) + plane_in[y1 * w + x1] * lx;
                            plane_out[y * ow + x_] = top * (1.0 - ly) + bot * ly;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.push(value, Op::Upsample2 { x, mode }, &[x])
    }

    fn channel_layout(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.value(x).shape();
        if s.len() < 2 {
            return shape_err(op, format!("need (N, C, ...), got {s:?}"));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// Training-mode batch normalization using batch statistics.
    ///
    /// Works per feature on `(N, C)` and per channel on `(N, C, H, W)`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.channel_layout(x, "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        let count = n * inner;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &src[(b * c + ch) * inner..][..inner];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                let s = &src[(b * c + ch) * inner..][..inner];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let var_out = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.channel_layout(x, "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm", format!("running stats for {} channels, need {c}", running_mean.len()));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, running_mean, inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(
                "batch_norm",
                format!(
                    "affine {:?}/{:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            );
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.channel_layout(x, "batch_norm")?;
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push(value, op, &[x, gamma, beta])
    }

    /// Replaces the forward value of `x` while passing gradients straight through.
    pub fn with_value(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            return shape_err(
                "with_value",
                format!("{:?} vs {:?}", value.shape(), self.value(x).shape()),
            );
        }
        self.push(value, Op::WithValue(x), &[x])
    }

    /// Runs reverse-mode accumulation from a scalar `loss` and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &node.param {
                        Some(name) => match out.by_param.get_mut(name) {
                            Some(existing) => existing.add_assign(&g),
                            None => {
                                out.by_param.insert(name.clone(), g.clone());
                            }
                        },
                        None => {}
                    }
                    out.by_leaf.insert(i, g);
                }
                continue;
            }
            backprop_node(nodes, node, &g, &mut grads)?;
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(out)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let like = |v: Var, data: Vec<f64>| Tensor::new(nodes[v.0].value.shape(), data);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, false);
                accumulate(nodes, grads, *a, like(*a, ga)?);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, false);
                accumulate(nodes, grads, *b, like(*b, gb)?);
            }
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if needs(*b) {
                let cols = val(*b).len();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(nodes, grads, *b, like(*b, gb)?);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |gv, bv| gv * bv)?);
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |gv, av| gv * av)?);
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::Shift(x) | Op::WithValue(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::Relu(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
            accumulate(nodes, grads, *x, gx);
        }
        Op::Tanh(x) => {
            let gx = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
            accumulate(nodes, grads, *x, gx);
        }
        Op::Abs(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| gv * sign(xv))?;
            accumulate(nodes, grads, *x, gx);
        }
        Op::Square(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| 2.0 * gv * xv)?;
            accumulate(nodes, grads, *x, gx);
        }
        Op::LogClamped(x) => {
            let gx = g.zip_map(val(*x), |gv, xv| if xv > LOG_CLAMP { gv / xv } else { 0.0 })?;
            accumulate(nodes, grads, *x, gx);
        }
        Op::Softmax(x) => {
            let k = *node.value.shape().last().expect("shape");
            let mut gx = vec![0.0; g.len()];
            for ((y, gy), dst) in node.value.data().chunks(k).zip(g.data().chunks(k)).zip(gx.chunks_mut(k)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    dst[j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, like(*x, gx)?);
        }
        Op::LogSoftmax(x) => {
            let k = *node.value.shape().last().expect("shape");
            let mut gx = vec![0.0; g.len()];
            for ((y, gy), dst) in node.value.data().chunks(k).zip(g.data().chunks(k)).zip(gx.chunks_mut(k)) {
                let total: f64 = gy.iter().sum();
                for j in 0..k {
                    dst[j] = gy[j] - y[j].exp() * total;
                }
            }
            accumulate(nodes, grads, *x, like(*x, gx)?);
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::Mean(x) => {
            let gv = g.data()[0] / val(*x).len() as f64;
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::MeanRows(x) => {
            let (rows, cols) = val(*x).rows_cols();
            let mut gx = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                gx.extend(g.data().iter().map(|v| v / rows as f64));
            }
            accumulate(nodes, grads, *x, like(*x, gx)?);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.reshape(val(*x).shape())?),
        Op::Conv2d { x, w, b, geom, out_ch } => {
            let plane = geom.out_h() * geom.out_w();
            let (kk, ncols) = (geom.col_rows(), geom.col_cols());
            let gmat = kernels::batch_to_channel_major(g.data(), geom.batch, *out_ch, plane);
            if let Some(b) = b {
                if needs(*b) {
                    let gb: Vec<f64> = gmat.chunks(ncols).map(|c| c.iter().sum()).collect();
                    accumulate(nodes, grads, *b, like(*b, gb)?);
                }
            }
            if needs(*w) {
                let cols = kernels::im2col(val(*x).data(), geom);
                let mut gw = vec![0.0; *out_ch * kk];
                kernels::gemm(*out_ch, ncols, kk, &gmat, false, &cols, true, &mut gw, false);
                accumulate(nodes, grads, *w, like(*w, gw)?);
            }
            if needs(*x) {
                let mut gcols = vec![0.0; kk * ncols];
                kernels::gemm(kk, *out_ch, ncols, val(*w).data(), true, &gmat, false, &mut gcols, false);
                accumulate(nodes, grads, *x, like(*x, kernels::col2im(&gcols, geom))?);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let mut gx = vec![0.0; val(*x).len()];
            for (&idx, gv) in argmax.iter().zip(g.data()) {
                gx[idx] += gv;
            }
            accumulate(nodes, grads, *x, like(*x, gx)?);
        }
        Op::Upsample2 { x, mode } => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut gx = vec![0.0; val(*x).len()];
            match mode {
                UpsampleMode::Nearest => {
                    for (gi, go) in gx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                        for y in 0..oh {
                            for x_ in 0..ow {
                                gi[(y / 2) * w + x_ / 2] += go[y * ow + x_];
                            }
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    let (ty, tx) = (kernels::bilinear_taps(oh, h), kernels::bilinear_taps(ow, w));
                    for (gi, go) in gx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                            for (x_, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let gv = go[y * ow + x_];
                                gi[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                gi[y0 * w + x1] += gv * (1.0 - ly) * lx;
                                gi[y1 * w + x0] += gv * ly * (1.0 - lx);
                                gi[y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, like(*x, gx)?);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = val(*x).shape();
            let (n, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let gy = g.data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        sum_g[ch] += gy[i];
                        sum_gx[ch] += gy[i] * xhat[i];
                    }
                }
            }
            if needs(*gamma) {
                accumulate(nodes, grads, *gamma, like(*gamma, sum_gx.clone())?);
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, like(*beta, sum_g.clone())?);
            }
            if needs(*x) {
                let gm = val(*gamma).data();
                let m = (n * inner) as f64;
                let mut gx = vec![0.0; gy.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let k = gm[ch] * inv_std[ch];
                        for i in off..off + inner {
                            gx[i] = if *batch_stats {
                                k * (gy[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * gy[i]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, like(*x, gx)?);
            }
        }
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::scalar(0.0));
        let y = tape.tanh(w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn double_backward_fails() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::scalar(3.0));
        let y = tape.square(w).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::TapeConsumed);
        assert!(matches!(tape.relu(y), Err(_)));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn conv_requires_nchw() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(tape.conv2d(x, w, None, 0).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, -1.0]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.conv2d(xv, wv, None, 0).unwrap();
        // each output is x[i][j] - x[i+1][j+1] = -4
        assert_eq!(tape.value(y).data(), &[-4.0; 4]);
    }

    #[test]
    fn nearest_upsample_repeats_pixels() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample2(x, UpsampleMode::Nearest).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bilinear_upsample_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let y = tape.upsample2(x, UpsampleMode::Bilinear).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn with_value_passes_gradient_through() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::scalar(2.0));
        let sq = tape.square(w).unwrap();
        let replaced = tape.with_value(sq, Tensor::scalar(-1.0)).unwrap();
        assert_eq!(tape.value(replaced).data(), &[-1.0]);
        let grads = tape.backward(replaced).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constants_do_not_record_backward_state() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, -2.0]));
        let y = tape.relu(x).unwrap();
        assert!(!tape.requires_grad(y));
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.param_names().count(), 0);
    }
}
