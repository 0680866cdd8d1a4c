//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients into the leaves that
//! were created with `requires_grad`. Repeated `backward` calls add to those
//! accumulators until `zero_grad` is called.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, co: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom, ci: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Act { kind, .. } => match kind {
                Activation::LeakyRelu(_) => "leaky_relu",
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
                Activation::Sigmoid => "sigmoid",
            },
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanPerSample(..) => "mean_per_sample",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Persistent accumulator for `requires_grad` leaves.
    leaf_grad: Option<Vec<f64>>,
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Places a tensor on the tape; gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        let needs_grad = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        Ok(self.push_node(value, Op::Leaf, needs_grad))
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// A gradient-free copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.value(v).clone();
        value.requires_grad = false;
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.leaf_grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, leaf_grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name().into() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_node(value, op, needs_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- layer primitives ------------------------------------------------

    /// Cross-correlation of `x` [N,Ci,H,W] with `w` [Co,Ci,kh,kw] plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, ci, h, wd) = self.value(x).dims4(OP)?;
        let (co, wci, kh, kw) = self.value(w).dims4(OP)?;
        if wci != ci {
            return Err(Error::shape(
                OP,
                format!("input has {ci} channels but weight expects {wci} (weight shape {:?})", self.shape(w)),
            ));
        }
        if self.shape(b) != [co] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{co}]", self.shape(b))));
        }
        let geom = ConvGeom::new(ci, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            Error::shape(OP, format!("kernel {kh}x{kw} with pad {pad}, stride {stride} does not fit input {h}x{wd}"))
        })?;
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; k * p];
        let wdata = self.data(w);
        let bias = self.data(b);
        for s in 0..n {
            im2col(&self.data(x)[s * geom.image_len()..(s + 1) * geom.image_len()], &geom, &mut cols);
            let dst = &mut out[s * co * p..(s + 1) * co * p];
            for (c, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[c]);
            }
            gemm(Mat::new(wdata, co, k), Mat::new(&cols, k, p), 1.0, dst);
        }
        self.push(&[n, co, geom.out_h, geom.out_w], out, Op::Conv2d { x, w, b, geom, co }, &[x, w, b])
    }

    /// Transposed convolution of `x` [N,Ci,H,W] with `w` [Ci,Co,kh,kw]: the
    /// adjoint of `conv2d` with respect to its input, plus bias.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, ci, h, wd) = self.value(x).dims4(OP)?;
        let (wci, co, kh, kw) = self.value(w).dims4(OP)?;
        if wci != ci {
            return Err(Error::shape(
                OP,
                format!("input has {ci} channels but weight expects {wci} (weight shape {:?})", self.shape(w)),
            ));
        }
        if self.shape(b) != [co] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{co}]", self.shape(b))));
        }
        if stride == 0 || pad + 1 > kh || pad + 1 > kw {
            return Err(Error::shape(OP, format!("stride {stride} / pad {pad} invalid for kernel {kh}x{kw}")));
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let geom = ConvGeom::new(co, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| Error::shape(OP, format!("inconsistent geometry for input {h}x{wd}")))?;
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * geom.image_len()];
        let mut cols = vec![0.0; k * p];
        let wdata = self.data(w);
        let bias = self.data(b);
        for s in 0..n {
            let xs = &self.data(x)[s * ci * p..(s + 1) * ci * p];
            gemm(Mat::new(wdata, ci, k).t(), Mat::new(xs, ci, p), 0.0, &mut cols);
            let dst = &mut out[s * geom.image_len()..(s + 1) * geom.image_len()];
            for (c, plane) in dst.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v = bias[c]);
            }
            col2im(&cols, &geom, dst);
        }
        self.push(&[n, co, oh, ow], out, Op::ConvTranspose2d { x, w, b, geom, ci }, &[x, w, b])
    }

    /// Training-mode batch norm: standardizes each channel over (N,H,W)
    /// with the batch's own statistics, then applies `gamma`/`beta`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.bn_check(x, gamma, beta, eps)?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for sample in 0..n {
                s += xd[(sample * c + ch) * hw..(sample * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0;
            for sample in 0..n {
                ss += xd[(sample * c + ch) * hw..(sample * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, (n, c, hw));
        let shape = self.shape(x).to_vec();
        let stats = BatchStats { mean: mean.clone(), var };
        let v = self.push(
            &shape,
            out,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats: true },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.bn_check(x, gamma, beta, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats do not have {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, &inv_std, (n, c, h * w));
        let shape = self.shape(x).to_vec();
        self.push(
            &shape,
            out,
            Op::BatchNorm { x, gamma, beta, mean: running_mean.to_vec(), inv_std, batch_stats: false },
            &[x, gamma, beta],
        )
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(usize, usize, usize, usize)> {
        let dims = self.value(x).dims4("batch_norm")?;
        let c = dims.1;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} / beta {:?} do not match {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm eps must be positive, got {eps}")));
        }
        Ok(dims)
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        (n, c, hw): (usize, usize, usize),
    ) -> Vec<f64> {
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for sample in 0..n {
            for ch in 0..c {
                let range = (sample * c + ch) * hw..(sample * c + ch + 1) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for (o, v) in out[range.clone()].iter_mut().zip(&xd[range]) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        out
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(slope) = kind {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!("leaky_relu slope must lie in (0,1), got {slope}")));
            }
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Activation::LeakyRelu(_) => |v, s| if v >= 0.0 { v } else { s * v },
            Activation::Relu => |v, _| if v >= 0.0 { v } else { 0.0 },
            Activation::Tanh => |v, _| v.tanh(),
            Activation::Sigmoid => |v, _| sigmoid(v),
        };
        let slope = match kind {
            Activation::LeakyRelu(s) => s,
            _ => 0.0,
        };
        let out = self.data(x).iter().map(|&v| f(v, slope)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Act { x, kind }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    // ---- elementwise and reductions --------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.same_shape(op.name(), a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(&shape, out, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(&shape, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Gradient passes where `lo <= x <= hi`, and is zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(&[1], vec![s], Op::Mean(x), &[x])
    }

    /// Averages every axis but the first: [N, ...] -> [N].
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x)[0];
        let per = self.value(x).numel() / n;
        let out = self.data(x).chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        self.push(&[n], out, Op::MeanPerSample(x), &[x])
    }

    /// Channel-axis concatenation of two [N,·,H,W] tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (n, ca, h, w) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(OP, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&self.data(a)[s * la..(s + 1) * la]);
            out.extend_from_slice(&self.data(b)[s * lb..(s + 1) * lb]);
        }
        self.push(&[n, ca + cb, h, w], out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.leaf_grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            for (var, delta) in self.input_grads(i, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    None => grads[var.0] = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom, co } => {
                let (x, w, b, co) = (*x, *w, *b, *co);
                let n = self.shape(x)[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let mut res = Vec::new();
                if self.wants(w) {
                    let mut dw = vec![0.0; co * k];
                    let mut cols = vec![0.0; k * p];
                    for s in 0..n {
                        im2col(&self.data(x)[s * geom.image_len()..(s + 1) * geom.image_len()], geom, &mut cols);
                        gemm(
                            Mat::new(&g[s * co * p..(s + 1) * co * p], co, p),
                            Mat::new(&cols, k, p).t(),
                            1.0,
                            &mut dw,
                        );
                    }
                    res.push((w, dw));
                }
                if self.wants(b) {
                    res.push((b, channel_sums(g, n, co, p)));
                }
                if self.wants(x) {
                    let mut dx = vec![0.0; n * geom.image_len()];
                    let mut dcols = vec![0.0; k * p];
                    for s in 0..n {
                        gemm(
                            Mat::new(self.data(w), co, k).t(),
                            Mat::new(&g[s * co * p..(s + 1) * co * p], co, p),
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, geom, &mut dx[s * geom.image_len()..(s + 1) * geom.image_len()]);
                    }
                    res.push((x, dx));
                }
                res
            }
            Op::ConvTranspose2d { x, w, b, geom, ci } => {
                let (x, w, b, ci) = (*x, *w, *b, *ci);
                let n = self.shape(x)[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.image_len();
                let mut dcols_all = vec![0.0; n * k * p];
                for s in 0..n {
                    im2col(&g[s * img..(s + 1) * img], geom, &mut dcols_all[s * k * p..(s + 1) * k * p]);
                }
                let mut res = Vec::new();
                if self.wants(w) {
                    let mut dw = vec![0.0; ci * k];
                    for s in 0..n {
                        gemm(
                            Mat::new(&self.data(x)[s * ci * p..(s + 1) * ci * p], ci, p),
                            Mat::new(&dcols_all[s * k * p..(s + 1) * k * p], k, p).t(),
                            1.0,
                            &mut dw,
                        );
                    }
                    res.push((w, dw));
                }
                if self.wants(b) {
                    res.push((b, channel_sums(g, n, geom.channels, geom.height * geom.width)));
                }
                if self.wants(x) {
                    let mut dx = vec![0.0; n * ci * p];
                    for s in 0..n {
                        gemm(
                            Mat::new(self.data(w), ci, k),
                            Mat::new(&dcols_all[s * k * p..(s + 1) * k * p], k, p),
                            0.0,
                            &mut dx[s * ci * p..(s + 1) * ci * p],
                        );
                    }
                    res.push((x, dx));
                }
                res
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, h, w) = self.value(x).dims4("batch_norm").expect("checked in forward");
                let hw = h * w;
                let m = (n * hw) as f64;
                let (xd, ga) = (self.data(x), self.data(gamma));
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                // per channel: Σ dy and Σ dy·x̂
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for (gy, v) in g[r.clone()].iter().zip(&xd[r]) {
                            dbeta[ch] += gy;
                            dgamma[ch] += gy * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                let mut res = Vec::new();
                if self.wants(x) {
                    let mut dx = vec![0.0; xd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                            let (mu, is, gm) = (mean[ch], inv_std[ch], ga[ch]);
                            if *batch_stats {
                                let (sum_dy, sum_dy_xhat) = (dbeta[ch], dgamma[ch]);
                                for ((d, gy), v) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                                    let xhat = (v - mu) * is;
                                    *d = gm * is / m * (m * gy - sum_dy - xhat * sum_dy_xhat);
                                }
                            } else {
                                for (d, gy) in dx[r.clone()].iter_mut().zip(&g[r]) {
                                    *d = gy * gm * is;
                                }
                            }
                        }
                    }
                    res.push((x, dx));
                }
                res.push((gamma, dgamma));
                res.push((beta, dbeta));
                res
            }
            Op::Act { x, kind } => {
                let xd = self.data(*x);
                let dx = match *kind {
                    Activation::LeakyRelu(s) => {
                        g.iter().zip(xd).map(|(gy, &v)| if v >= 0.0 { *gy } else { gy * s }).collect()
                    }
                    Activation::Relu => g.iter().zip(xd).map(|(gy, &v)| if v >= 0.0 { *gy } else { 0.0 }).collect(),
                    Activation::Tanh => g.iter().zip(out).map(|(gy, y)| gy * (1.0 - y * y)).collect(),
                    Activation::Sigmoid => g.iter().zip(out).map(|(gy, y)| gy * y * (1.0 - y)).collect(),
                };
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(self.data(*b)).map(|(gy, v)| gy * v).collect()),
                (*b, g.iter().zip(self.data(*a)).map(|(gy, v)| gy * v).collect()),
            ],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Log(x) => vec![(*x, g.iter().zip(self.data(*x)).map(|(gy, v)| gy / v).collect())],
            Op::Abs(x) => vec![(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(gy, &v)| {
                        if v > 0.0 {
                            *gy
                        } else if v < 0.0 {
                            -gy
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                g.iter().zip(self.data(*x)).map(|(gy, &v)| if v >= *lo && v <= *hi { *gy } else { 0.0 }).collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                vec![(*x, vec![g[0] / len as f64; len])]
            }
            Op::MeanPerSample(x) => {
                let n = self.shape(*x)[0];
                let per = self.value(*x).numel() / n;
                let dx = (0..n).flat_map(|s| std::iter::repeat_n(g[s] / per as f64, per)).collect();
                vec![(*x, dx)]
            }
            Op::ConcatChannels(a, b) => {
                let n = self.shape(*a)[0];
                let la = self.value(*a).numel() / n;
                let lb = self.value(*b).numel() / n;
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let chunk = &g[s * (la + lb)..(s + 1) * (la + lb)];
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter().sum::<f64>();
        }
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
