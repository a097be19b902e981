//! Reverse-mode tape. A [`Graph`] is built fresh for every forward pass: each
//! op appends a node holding its output value plus whatever it needs to
//! propagate gradients, and [`Graph::backward`] walks the nodes in reverse.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
/// `var` is the unbiased estimate used for running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Hardswish(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: Vec<T>,
    },
    AvgPool2d {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    RepeatBatch {
        input: Var,
        times: usize,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Hardswish(_) => "hardswish",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::GlobalAvgPool(_) => "global_avgpool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat(_) => "concat",
            Op::Add(..) => "add",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::RepeatBatch { .. } => "repeat_batch",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::Hardswish(x) | Op::GlobalAvgPool(x) | Op::Reshape(x) => vec![*x],
            Op::Softmax { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::Permute { input, .. }
            | Op::IndexSelect { input, .. }
            | Op::RepeatBatch { input, .. }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::Attention { q, k, v, bias, .. } => {
                let mut out = vec![*q, *k, *v];
                out.extend(bias);
                out
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(xs) => xs.clone(),
            Op::Add(a, b) => vec![*a, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded tape of tensor operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    track_kinks: bool,
    kink_hash: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn dims4(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => shape_err(format!("{what}: expected rank-4 tensor, got {s:?}")),
    }
}

fn dims2(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => shape_err(format!("{what}: expected rank-2 tensor, got {s:?}")),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(data.len());
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn hardswish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

fn hardswish_grad(x: f64) -> f64 {
    if x < -3.0 {
        0.0
    } else if x > 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

/// Splits a batch-norm input into (batch, channels, spatial) extents.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => shape_err(format!("batchnorm: expected (N,C) or (N,C,H,W), got {shape:?}")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_kinks: false,
            kink_hash: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Row-stochastic attention weights `(N, H, Lq, Lk)` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Records, from now on, which side of every activation kink each
    /// element falls on. Two forward passes with equal signatures are
    /// piecewise-smooth neighbours of each other.
    pub fn set_kink_tracking(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mix_kink(&mut self, code: u8) {
        self.kink_hash ^= code as u64;
        self.kink_hash = self.kink_hash.wrapping_mul(FNV_PRIME);
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `(N,C,H,W)` with `(O,C,K,K)` plus an optional `(O)` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "conv2d input")?;
        let [o, ci, kh, kw] = dims4(self.value(weight), "conv2d weight")?;
        if ci != c {
            return shape_err(format!("conv2d: input has {c} channels, weight expects {ci}"));
        }
        if kh != kw {
            return shape_err(format!("conv2d: non-square kernel {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride 0");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "conv2d: kernel {kh} does not fit padded input {h}x{w} (pad {pad})"
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return shape_err(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.value(b).shape()
                ));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let ol = geom.out_len();
        let pl = geom.patch_len();
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bias_vals: Option<Vec<f64>> =
            bias.map(|b| self.value(b).data().iter().map(|v| v.to_f64()).collect());
        let mut out = Vec::with_capacity(n * o * ol);
        let mut acc = vec![0.0; o * ol];
        for s in 0..n {
            let cols = kernels::im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom);
            acc.iter_mut().for_each(|a| *a = 0.0);
            if let Some(bv) = &bias_vals {
                for (oc, b) in bv.iter().enumerate() {
                    acc[oc * ol..(oc + 1) * ol].iter_mut().for_each(|a| *a = *b);
                }
            }
            kernels::matmul_acc(wt, &cols, o, pl, ol, &mut acc);
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
        let value = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    /// `(N,F) · (F,G) + (G)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, f] = dims2(self.value(input), "linear input")?;
        let [fw, g] = dims2(self.value(weight), "linear weight")?;
        if f != fw {
            return shape_err(format!("linear: input width {f}, weight expects {fw}"));
        }
        let mut acc = vec![0.0; n * g];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [g] {
                return shape_err(format!("linear: bias shape {:?}, expected [{g}]", bv.shape()));
            }
            for row in acc.chunks_mut(g) {
                for (a, b) in row.iter_mut().zip(bv.data()) {
                    *a = b.to_f64();
                }
            }
        }
        kernels::matmul_acc(
            self.value(input).data(),
            self.value(weight).data(),
            n,
            f,
            g,
            &mut acc,
        );
        let value = Tensor::new(&[n, g], kernels::narrow(&acc))?;
        self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    fn bn_check(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = bn_layout(self.value(input).shape())?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return shape_err(format!(
                    "batchnorm: {name} shape {:?}, expected [{c}]",
                    self.value(p).shape()
                ));
            }
        }
        Ok((n, c, s))
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let (n, c, s) = bn_layout(self.value(input).shape())?;
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for b in 0..n {
            for ch in 0..c {
                let g = gm[ch].to_f64();
                let be = bt[ch].to_f64();
                let base = (b * c + ch) * s;
                for &xv in &x[base..base + s] {
                    let xh = (xv.to_f64() - mean[ch]) * inv_std[ch];
                    xhat.push(T::from_f64(xh));
                    out.push(T::from_f64(g * xh + be));
                }
            }
        }
        let value = Tensor::new(self.value(input).shape(), out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Batch norm with batch statistics (biased variance, `eps` = [`BN_EPS`]).
    /// Returns the per-channel statistics for running-average updates.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, s) = self.bn_check(input, gamma, beta)?;
        let x = self.value(input).data();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * s;
                sum += x[base..base + s].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * s;
                sq += x[base..base + s]
                    .iter()
                    .map(|v| (v.to_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbiased = if n * s > 1 {
            var.iter().map(|v| v * m / (m - 1.0)).collect()
        } else {
            var.clone()
        };
        let out = self.bn_apply(input, gamma, beta, &mean, inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(input, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return shape_err(format!("batchnorm: running stats must have shape [{c}]"));
        }
        let mean: Vec<f64> = running_mean.data().iter().map(|v| v.to_f64()).collect();
        let inv_std = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v.to_f64() + BN_EPS).sqrt())
            .collect();
        self.bn_apply(input, gamma, beta, &mean, inv_std, false)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = x.map(|v| if v > T::ZERO { v } else { T::ZERO });
        if self.track_kinks {
            let codes: Vec<u8> = x.data().iter().map(|&v| (v > T::ZERO) as u8).collect();
            codes.into_iter().for_each(|c| self.mix_kink(c));
        }
        self.push(value, Op::Relu(input))
    }

    /// `x · clamp(x + 3, 0, 6) / 6`.
    pub fn hardswish(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = x.map(|v| T::from_f64(hardswish(v.to_f64())));
        if self.track_kinks {
            let codes: Vec<u8> = x
                .data()
                .iter()
                .map(|v| {
                    let v = v.to_f64();
                    (v > -3.0) as u8 + (v > 3.0) as u8
                })
                .collect();
            codes.into_iter().for_each(|c| self.mix_kink(c));
        }
        self.push(value, Op::Hardswish(input))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if axis >= shape.len() {
            return shape_err(format!("softmax: axis {axis} for shape {shape:?}"));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let data = x.data();
        let mut out = vec![T::ZERO; data.len()];
        let mut buf = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[at(j)].to_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = (data[at(j)].to_f64() - max).exp();
                    sum += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[at(j)] = T::from_f64(b / sum);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { input, axis })
    }

    /// Scaled dot-product attention, per head:
    /// `softmax(q·kᵀ/√D + bias) · v`.
    ///
    /// Shapes: `q (N,H,Lq,D)`, `k (N,H,Lk,D)`, `v (N,H,Lk,Dv)`, `bias (H,Lq,Lk)`;
    /// the output is `(N,H,Lq,Dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let [n, h, lq, d] = dims4(self.value(q), "attention q")?;
        let [nk, hk, lk, dk] = dims4(self.value(k), "attention k")?;
        let [nv, hv, lv, dv] = dims4(self.value(v), "attention v")?;
        if (nk, hk, dk) != (n, h, d) || (nv, hv, lv) != (n, h, lk) {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?} are incompatible",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [h, lq, lk] {
                return shape_err(format!(
                    "attention: bias shape {:?}, expected [{h}, {lq}, {lk}]",
                    self.value(b).shape()
                ));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let bd = bias.map(|b| self.value(b).data());
        let mut probs = vec![T::ZERO; n * h * lq * lk];
        let mut out = vec![T::ZERO; n * h * lq * dv];
        let mut logits = vec![0.0f64; lk];
        let mut acc = vec![0.0f64; dv];
        for b in 0..n {
            for hd in 0..h {
                let bh = b * h + hd;
                let qh = &qd[bh * lq * d..(bh + 1) * lq * d];
                let kh = &kd[bh * lk * d..(bh + 1) * lk * d];
                let vh = &vd[bh * lk * dv..(bh + 1) * lk * dv];
                for i in 0..lq {
                    let qi = &qh[i * d..(i + 1) * d];
                    let mut max = f64::NEG_INFINITY;
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kh[j * d..(j + 1) * d];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        *l = dot * scale
                            + bd.map_or(0.0, |bias| bias[(hd * lq + i) * lk + j].to_f64());
                        max = max.max(*l);
                    }
                    let mut sum = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        sum += *l;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let prow = &mut probs[(bh * lq + i) * lk..(bh * lq + i + 1) * lk];
                    for (j, l) in logits.iter().enumerate() {
                        let p = l / sum;
                        prow[j] = T::from_f64(p);
                        let vj = &vh[j * dv..(j + 1) * dv];
                        for (a, x) in acc.iter_mut().zip(vj) {
                            *a += p * x.to_f64();
                        }
                    }
                    let orow = &mut out[(bh * lq + i) * dv..(bh * lq + i + 1) * dv];
                    for (o, a) in orow.iter_mut().zip(&acc) {
                        *o = T::from_f64(*a);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, h, lq, dv], out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
            },
        )
    }

    /// Mean over `kernel×kernel` windows, no padding.
    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "avgpool2d input")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return shape_err(format!(
                "avgpool2d: kernel {kernel} stride {stride} on {h}x{w}"
            ));
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let x = self.value(input).data();
        let norm = (kernel * kernel) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    for ky in 0..kernel {
                        let row = (oy * stride + ky) * w + ox * stride;
                        sum += plane[row..row + kernel].iter().map(|v| v.to_f64()).sum::<f64>();
                    }
                    out.push(T::from_f64(sum / norm));
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(
            value,
            Op::AvgPool2d {
                input,
                kernel,
                stride,
            },
        )
    }

    /// `(N,C,H,W) → (N,C)`.
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "global_avgpool input")?;
        let x = self.value(input).data();
        let norm = (h * w) as f64;
        let out = x
            .chunks(h * w)
            .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() / norm))
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        self.push(value, Op::GlobalAvgPool(input))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c] = dims2(self.value(logits), "cross_entropy logits")?;
        if labels.len() != n {
            return shape_err(format!("cross_entropy: {} labels for batch {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidInput(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &label) in x.chunks(c).zip(labels) {
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label].to_f64();
            probs.extend(row.iter().map(|v| (v.to_f64() - lse).exp()));
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidInput("concat of zero inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if base.len() < 2 {
            return shape_err("concat: rank must be at least 2");
        }
        let mut channels = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return shape_err(format!("concat: {s:?} does not match {base:?}"));
            }
            channels += s[1];
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(outer * channels * inner);
        for b in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let span = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * span..(b + 1) * span]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat(inputs.to_vec()))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Add(a, b))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape(input))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute: {perm:?} is not a permutation of rank {rank}"));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), perm);
        let value = Tensor::new(&shape, data)?;
        self.push(
            value,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
        )
    }

    /// Gathers entries of axis 1 of a rank-3 tensor: `(A,B,C) → (A,len,C)`.
    pub fn index_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [a, b, c] = match *x.shape() {
            [a, b, c] => [a, b, c],
            ref s => return shape_err(format!("index_select: expected rank 3, got {s:?}")),
        };
        if indices.is_empty() {
            return shape_err("index_select: no indices");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return shape_err(format!("index_select: index {bad} out of range {b}"));
        }
        let data = x.data();
        let mut out = Vec::with_capacity(a * indices.len() * c);
        for outer in 0..a {
            for &i in indices {
                let at = (outer * b + i) * c;
                out.extend_from_slice(&data[at..at + c]);
            }
        }
        let value = Tensor::new(&[a, indices.len(), c], out)?;
        self.push(
            value,
            Op::IndexSelect {
                input,
                indices: indices.to_vec(),
            },
        )
    }

    /// Tiles a tensor with leading extent 1 `times` times along axis 0.
    pub fn repeat_batch(&mut self, input: Var, times: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape()[0] != 1 || times == 0 {
            return shape_err(format!("repeat_batch: shape {:?} x{times}", x.shape()));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = times;
        let data = x.data().repeat(times);
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::RepeatBatch { input, times })
    }

    /// `Σ input ⊙ weights` as a scalar; the weights are constants.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != weights.numel() {
            return shape_err(format!(
                "weighted_sum: {:?} vs weights {:?}",
                x.shape(),
                weights.shape()
            ));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum();
        let value = Tensor::scalar(T::from_f64(s));
        self.push(
            value,
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidInput(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                            *e += *x;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Vec<T>)>> {
        let dy = grad.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let [n, c, h, w] = dims4(self.value(*input), "conv2d")?;
                let [o, _, k, _] = dims4(self.value(*weight), "conv2d")?;
                let [_, _, oh, ow] = dims4(&self.nodes[i].value, "conv2d")?;
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                    out_h: oh,
                    out_w: ow,
                };
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let x = self.value(*input).data();
                if self.rg(*weight) {
                    let mut acc = vec![0.0; o * pl];
                    for s in 0..n {
                        let cols = kernels::im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom);
                        let cols_t = kernels::transpose(&cols, pl, ol);
                        kernels::matmul_acc(&dy[s * o * ol..(s + 1) * o * ol], &cols_t, o, ol, pl, &mut acc);
                    }
                    out.push((*weight, kernels::narrow(&acc)));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut acc = vec![0.0; o];
                        for s in 0..n {
                            for (oc, a) in acc.iter_mut().enumerate() {
                                let at = (s * o + oc) * ol;
                                *a += dy[at..at + ol].iter().map(|v| v.to_f64()).sum::<f64>();
                            }
                        }
                        out.push((*b, kernels::narrow(&acc)));
                    }
                }
                if self.rg(*input) {
                    let w_t = kernels::transpose(self.value(*weight).data(), o, pl);
                    let mut dx = Vec::with_capacity(x.len());
                    let mut dcols = vec![0.0; pl * ol];
                    let mut img = vec![0.0; c * h * w];
                    for s in 0..n {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        img.iter_mut().for_each(|v| *v = 0.0);
                        kernels::matmul_acc(&w_t, &dy[s * o * ol..(s + 1) * o * ol], pl, o, ol, &mut dcols);
                        kernels::col2im_acc(&dcols, &geom, &mut img);
                        dx.extend(img.iter().map(|&v| T::from_f64(v)));
                    }
                    out.push((*input, dx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [n, f] = dims2(self.value(*input), "linear")?;
                let [_, g] = dims2(self.value(*weight), "linear")?;
                if self.rg(*input) {
                    let w_t = kernels::transpose(self.value(*weight).data(), f, g);
                    out.push((*input, kernels::matmul(dy, &w_t, n, g, f)));
                }
                if self.rg(*weight) {
                    let x_t = kernels::transpose(self.value(*input).data(), n, f);
                    out.push((*weight, kernels::matmul(&x_t, dy, f, n, g)));
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut acc = vec![0.0; g];
                        for row in dy.chunks(g) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v.to_f64();
                            }
                        }
                        out.push((*b, kernels::narrow(&acc)));
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = bn_layout(self.value(*input).shape())?;
                let gm = self.value(*gamma).data();
                let m = (n * s) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for j in base..base + s {
                            let d = dy[j].to_f64();
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xhat[j].to_f64();
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = Vec::with_capacity(dy.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let g = gm[ch].to_f64() * inv_std[ch];
                            let base = (b * c + ch) * s;
                            for j in base..base + s {
                                let d = dy[j].to_f64();
                                let v = if *train {
                                    g * (d - sum_dy[ch] / m - xhat[j].to_f64() * sum_dy_xhat[ch] / m)
                                } else {
                                    g * d
                                };
                                dx.push(T::from_f64(v));
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, kernels::narrow(&sum_dy_xhat)));
                }
                if self.rg(*beta) {
                    out.push((*beta, kernels::narrow(&sum_dy)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&a, &d)| if a > T::ZERO { d } else { T::ZERO })
                    .collect();
                out.push((*x, dx));
            }
            Op::Hardswish(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(a, d)| T::from_f64(hardswish_grad(a.to_f64()) * d.to_f64()))
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { input, axis } => {
                let y = &self.nodes[i].value;
                let shape = y.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let yd = y.data();
                let mut dx = vec![T::ZERO; yd.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| yd[at(j)].to_f64() * dy[at(j)].to_f64()).sum();
                        for j in 0..len {
                            dx[at(j)] = T::from_f64(yd[at(j)].to_f64() * (dy[at(j)].to_f64() - dot));
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
            } => {
                let [n, h, lq, d] = dims4(self.value(*q), "attention")?;
                let [_, _, lk, _] = dims4(self.value(*k), "attention")?;
                let [_, _, _, dv] = dims4(self.value(*v), "attention")?;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dvv = vec![0.0; vd.len()];
                let mut dbias = vec![0.0; h * lq * lk];
                let mut ds = vec![0.0; lk];
                for b in 0..n {
                    for hd in 0..h {
                        let bh = b * h + hd;
                        for i2 in 0..lq {
                            let prow = &probs[(bh * lq + i2) * lk..(bh * lq + i2 + 1) * lk];
                            let dorow = &dy[(bh * lq + i2) * dv..(bh * lq + i2 + 1) * dv];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                let vj = &vd[(bh * lk + j) * dv..(bh * lk + j + 1) * dv];
                                let dp: f64 = dorow.iter().zip(vj).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                                let p = prow[j].to_f64();
                                ds[j] = dp;
                                dot += p * dp;
                                let dvj = &mut dvv[(bh * lk + j) * dv..(bh * lk + j + 1) * dv];
                                for (acc, g) in dvj.iter_mut().zip(dorow) {
                                    *acc += p * g.to_f64();
                                }
                            }
                            let qi = &qd[(bh * lq + i2) * d..(bh * lq + i2 + 1) * d];
                            for j in 0..lk {
                                let s = prow[j].to_f64() * (ds[j] - dot);
                                dbias[(hd * lq + i2) * lk + j] += s;
                                let kj = &kd[(bh * lk + j) * d..(bh * lk + j + 1) * d];
                                let dqi = &mut dq[(bh * lq + i2) * d..(bh * lq + i2 + 1) * d];
                                for (acc, kv) in dqi.iter_mut().zip(kj) {
                                    *acc += s * scale * kv.to_f64();
                                }
                                let dkj = &mut dk[(bh * lk + j) * d..(bh * lk + j + 1) * d];
                                for (acc, qv) in dkj.iter_mut().zip(qi) {
                                    *acc += s * scale * qv.to_f64();
                                }
                            }
                        }
                    }
                }
                out.push((*q, kernels::narrow(&dq)));
                out.push((*k, kernels::narrow(&dk)));
                out.push((*v, kernels::narrow(&dvv)));
                if let Some(bv) = bias {
                    out.push((*bv, kernels::narrow(&dbias)));
                }
            }
            Op::AvgPool2d {
                input,
                kernel,
                stride,
            } => {
                let [n, c, h, w] = dims4(self.value(*input), "avgpool2d")?;
                let [_, _, oh, ow] = dims4(&self.nodes[i].value, "avgpool2d")?;
                let norm = (kernel * kernel) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy[(p * oh + oy) * ow + ox].to_f64() / norm;
                            for ky in 0..*kernel {
                                let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                                dx[row..row + kernel].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
                out.push((*input, kernels::narrow(&dx)));
            }
            Op::GlobalAvgPool(input) => {
                let [_, _, h, w] = dims4(self.value(*input), "global_avgpool")?;
                let norm = (h * w) as f64;
                let dx = dy
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(T::from_f64(g.to_f64() / norm), h * w))
                    .collect();
                out.push((*input, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let [n, c] = dims2(self.value(*logits), "cross_entropy")?;
                let scale = dy[0].to_f64() / n as f64;
                let mut dx = Vec::with_capacity(n * c);
                for (b, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dx.push(T::from_f64((probs[b * c + j] - onehot) * scale));
                    }
                }
                out.push((*logits, dx));
            }
            Op::Concat(inputs) => {
                let shape = self.nodes[i].value.shape();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for v in inputs {
                    let span = self.value(*v).shape()[1] * inner;
                    if self.rg(*v) {
                        let mut dx = Vec::with_capacity(outer * span);
                        for b in 0..outer {
                            let at = b * total + offset;
                            dx.extend_from_slice(&dy[at..at + span]);
                        }
                        out.push((*v, dx));
                    }
                    offset += span;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inverse[p] = o;
                }
                let (dx, _) = permute_data(dy, grad.shape(), &inverse);
                out.push((*input, dx));
            }
            Op::IndexSelect { input, indices } => {
                let shape = self.value(*input).shape();
                let (a, b, c) = (shape[0], shape[1], shape[2]);
                let mut dx = vec![0.0; a * b * c];
                for outer in 0..a {
                    for (slot, &idx) in indices.iter().enumerate() {
                        let src = (outer * indices.len() + slot) * c;
                        let dst = (outer * b + idx) * c;
                        for t in 0..c {
                            dx[dst + t] += dy[src + t].to_f64();
                        }
                    }
                }
                out.push((*input, kernels::narrow(&dx)));
            }
            Op::RepeatBatch { input, times } => {
                let inner = dy.len() / times;
                let mut acc = vec![0.0; inner];
                for chunk in dy.chunks(inner) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g.to_f64();
                    }
                }
                out.push((*input, kernels::narrow(&acc)));
            }
            Op::WeightedSum { input, weights } => {
                let g = dy[0];
                out.push((*input, weights.iter().map(|&w| w * g).collect()));
            }
        }
        Ok(out)
    }
}
