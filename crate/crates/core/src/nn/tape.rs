//! Eager tape for reverse-mode differentiation.
//!
//! Every builder method validates shapes, computes the forward value
//! immediately, and records the op. `backward` walks the tape in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! gradient-carrying leaf. Nodes are topologically ordered by construction,
//! which keeps the reverse sweep a single indexed loop.
//!
//! Layout conventions: convolutional ops take `[batch, channels, length]`,
//! attention and token ops take `[batch, tokens, dim]`.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::nn::tensor::Tensor;

pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or differentiable leaf; `param` names parameter leaves.
    Leaf { param: Option<String> },
    Add,
    /// `[B, A, C] + [A, C]`, right side shared across the batch.
    AddBatchBcast,
    /// `[B, T, D] + [B, D]`, right side shared along the token axis.
    AddSeqBcast,
    Scale(f64),
    /// Identity forward, gradient multiplied by the factor on the way back.
    /// Exists so the finite-difference harness can prove its own sensitivity.
    ScaleGrad(f64),
    /// `[B, A, C] -> [B, C, A]`.
    SwapAxes12,
    Reshape { from: Vec<usize> },
    /// Concatenate along axis 1 of `[B, C, L]`.
    ConcatChannels,
    /// Mean over axis 1: `[B, T, D] -> [B, D]`.
    MeanAxis1,
    /// `x[.., D_in] @ w[D_out, D_in]^T + b` applied to the last axis.
    Linear,
    Conv1d { stride: usize, pad_left: usize },
    /// Kernel-2 stride-2 transposed conv: `[B, C_in, L] -> [B, C_out, 2L]`.
    ConvTranspose2x,
    /// Deterministic doubling: `out[2i] = x[i]`, `out[2i+1] = avg(x[i], x[i+1])`.
    UpsampleLinear2x,
    GroupNorm { groups: usize },
    Gelu,
    Attention { heads: usize },
    /// `sum(mask * (target - pred)^2) / sum(mask)`, a scalar.
    MaskedMse { target: Tensor, mask: Tensor },
    /// `dot(weights, x)`, a scalar. Used to reduce outputs under test.
    WeightedSum { weights: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    saved: Vec<Tensor>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(shape))
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor,
        saved: Vec<Tensor>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            saved,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Non-differentiable input (data, noise, encodings).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value, vec![], false)
    }

    /// Differentiable leaf without a parameter name (gradient-check inputs).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value, vec![], true)
    }

    /// Differentiable leaf tied to a named parameter.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            vec![],
            value,
            vec![],
            true,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o += x;
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], out, vec![], rg))
    }

    pub fn add_batch_bcast(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tx.shape().len() < 2 || &tx.shape()[1..] != tr.shape() {
            return Err(CoreError::Shape(format!(
                "add_batch_bcast: {:?} vs {:?}",
                tx.shape(),
                tr.shape()
            )));
        }
        let inner = tr.len();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(tr.data()) {
                *o += v;
            }
        }
        let rg = self.any_requires(&[x, r]);
        Ok(self.push(Op::AddBatchBcast, vec![x, r], out, vec![], rg))
    }

    pub fn add_seq_bcast(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let (tx, te) = (self.value(x), self.value(e));
        let xs = tx.shape();
        if xs.len() != 3 || te.shape() != [xs[0], xs[2]] {
            return Err(CoreError::Shape(format!(
                "add_seq_bcast: {:?} vs {:?}",
                xs,
                te.shape()
            )));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let mut out = tx.clone();
        {
            let od = out.data_mut();
            let ed = te.data();
            for bi in 0..b {
                for ti in 0..t {
                    let base = (bi * t + ti) * d;
                    let ebase = bi * d;
                    for di in 0..d {
                        od[base + di] += ed[ebase + di];
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, e]);
        Ok(self.push(Op::AddSeqBcast, vec![x, e], out, vec![], rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Scale(factor), vec![x], out, vec![], rg)
    }

    pub fn scale_grad(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::ScaleGrad(factor), vec![x], out, vec![], rg)
    }

    pub fn swap_axes_12(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("swap_axes_12 wants rank 3, got {s:?}")));
        }
        let (b, a, c) = (s[0], s[1], s[2]);
        let out = swap12(tx, b, a, c);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::SwapAxes12, vec![x], out, vec![], rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let tx = self.value(x);
        let from = tx.shape().to_vec();
        let out = tx.clone().reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape { from }, vec![x], out, vec![], rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(CoreError::Shape(format!(
                "concat_channels: {sa:?} vs {sb:?}"
            )));
        }
        let (bn, c1, l) = (sa[0], sa[1], sa[2]);
        let c2 = sb[1];
        let mut out = Tensor::zeros(&[bn, c1 + c2, l]);
        {
            let od = out.data_mut();
            for bi in 0..bn {
                let dst = bi * (c1 + c2) * l;
                od[dst..dst + c1 * l].copy_from_slice(&ta.data()[bi * c1 * l..(bi + 1) * c1 * l]);
                od[dst + c1 * l..dst + (c1 + c2) * l]
                    .copy_from_slice(&tb.data()[bi * c2 * l..(bi + 1) * c2 * l]);
            }
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(Op::ConcatChannels, vec![a, b], out, vec![], rg))
    }

    pub fn mean_axis1(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("mean_axis1 wants rank 3, got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[b, d]);
        {
            let od = out.data_mut();
            let xd = tx.data();
            for bi in 0..b {
                for ti in 0..t {
                    let base = (bi * t + ti) * d;
                    for di in 0..d {
                        od[bi * d + di] += xd[base + di];
                    }
                }
            }
            for v in od.iter_mut() {
                *v /= t as f64;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MeanAxis1, vec![x], out, vec![], rg))
    }

    /// Affine map over the last axis; leading axes are batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
            return Err(CoreError::Shape(format!("linear: x {xs:?} w {ws:?}")));
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        if tb.shape() != [d_out] {
            return Err(CoreError::Shape(format!("linear bias: {:?}", tb.shape())));
        }
        let rows = tx.len() / d_in;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let xd = tx.data();
            let wd = tw.data();
            let bd = tb.data();
            for r in 0..rows {
                let xrow = &xd[r * d_in..(r + 1) * d_in];
                let orow = &mut od[r * d_out..(r + 1) * d_out];
                for (j, o) in orow.iter_mut().enumerate() {
                    let wrow = &wd[j * d_in..(j + 1) * d_in];
                    let mut acc = bd[j];
                    for i in 0..d_in {
                        acc += xrow[i] * wrow[i];
                    }
                    *o = acc;
                }
            }
        }
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(Op::Linear, vec![x, w, b], out, vec![], rg))
    }

    /// Same-padded 1D convolution; stride 1 keeps the length, stride 2 halves
    /// it (rounding up).
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(CoreError::Shape(format!("conv1d: x {xs:?} w {ws:?}")));
        }
        let (bn, c_in, l) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(CoreError::Shape(format!(
                "conv1d channel mismatch: input {c_in}, weight {wc_in}"
            )));
        }
        if tb.shape() != [c_out] {
            return Err(CoreError::Shape(format!("conv1d bias: {:?}", tb.shape())));
        }
        if !(stride == 1 || stride == 2) {
            return Err(CoreError::InvalidParam(format!("conv1d stride {stride}")));
        }
        // same-padding keeps the kernel covered for any l >= 1
        if l == 0 {
            return Err(CoreError::Shape("conv1d: empty sequence".into()));
        }
        let out_len = l.div_ceil(stride);
        let total_pad = ((out_len - 1) * stride + k).saturating_sub(l);
        let pad_left = total_pad / 2;
        let mut out = Tensor::zeros(&[bn, c_out, out_len]);
        {
            let od = out.data_mut();
            let xd = tx.data();
            let wd = tw.data();
            let bd = tb.data();
            for bi in 0..bn {
                for co in 0..c_out {
                    let orow = &mut od[(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                    for o in orow.iter_mut() {
                        *o = bd[co];
                    }
                    for ci in 0..c_in {
                        let xrow = &xd[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                        let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (o, oslot) in orow.iter_mut().enumerate() {
                            let start = (o * stride) as isize - pad_left as isize;
                            let mut acc = 0.0;
                            for (kk, &wv) in wrow.iter().enumerate() {
                                let i = start + kk as isize;
                                if i >= 0 && (i as usize) < l {
                                    acc += xrow[i as usize] * wv;
                                }
                            }
                            *oslot += acc;
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(
            Op::Conv1d { stride, pad_left },
            vec![x, w, b],
            out,
            vec![],
            rg,
        ))
    }

    /// Stride-2 kernel-2 transposed convolution. Output length is exactly 2L;
    /// each input position feeds two non-overlapping output positions.
    pub fn conv_transpose_2x(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 3 || ws.len() != 3 || ws[2] != 2 {
            return Err(CoreError::Shape(format!("conv_transpose_2x: x {xs:?} w {ws:?}")));
        }
        let (bn, c_in, l) = (xs[0], xs[1], xs[2]);
        let (wc_in, c_out, _) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(CoreError::Shape(format!(
                "conv_transpose_2x channel mismatch: input {c_in}, weight {wc_in}"
            )));
        }
        if tb.shape() != [c_out] {
            return Err(CoreError::Shape(format!("conv_transpose_2x bias: {:?}", tb.shape())));
        }
        let out_len = 2 * l;
        let mut out = Tensor::zeros(&[bn, c_out, out_len]);
        {
            let od = out.data_mut();
            let xd = tx.data();
            let wd = tw.data();
            let bd = tb.data();
            for bi in 0..bn {
                for co in 0..c_out {
                    let orow =
                        &mut od[(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                    for o in orow.iter_mut() {
                        *o = bd[co];
                    }
                    for ci in 0..c_in {
                        let xrow = &xd[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                        let w0 = wd[(ci * c_out + co) * 2];
                        let w1 = wd[(ci * c_out + co) * 2 + 1];
                        for (i, &xv) in xrow.iter().enumerate() {
                            orow[2 * i] += xv * w0;
                            orow[2 * i + 1] += xv * w1;
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(Op::ConvTranspose2x, vec![x, w, b], out, vec![], rg))
    }

    pub fn upsample_linear_2x(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("upsample_linear_2x wants rank 3, got {s:?}")));
        }
        let (bn, c, l) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[bn, c, 2 * l]);
        {
            let od = out.data_mut();
            let xd = tx.data();
            for row in 0..bn * c {
                let xrow = &xd[row * l..(row + 1) * l];
                let orow = &mut od[row * 2 * l..(row + 1) * 2 * l];
                for i in 0..l {
                    let next = xrow[(i + 1).min(l - 1)];
                    orow[2 * i] = xrow[i];
                    orow[2 * i + 1] = 0.5 * (xrow[i] + next);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::UpsampleLinear2x, vec![x], out, vec![], rg))
    }

    /// Group normalization over `[B, C, L]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        if s.len() != 3 {
            return Err(CoreError::Shape(format!("group_norm wants rank 3, got {s:?}")));
        }
        let (bn, c, l) = (s[0], s[1], s[2]);
        if c % groups != 0 {
            return Err(CoreError::Shape(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(CoreError::Shape("group_norm affine shape".into()));
        }
        let cg = c / groups;
        let m = (cg * l) as f64;
        let mut out = Tensor::zeros(&[bn, c, l]);
        let mut means = Tensor::zeros(&[bn, groups]);
        let mut invstds = Tensor::zeros(&[bn, groups]);
        {
            let od = out.data_mut();
            let xd = tx.data();
            let gd = tg.data();
            let bd = tb.data();
            for bi in 0..bn {
                for g in 0..groups {
                    let start = (bi * c + g * cg) * l;
                    let span = &xd[start..start + cg * l];
                    let mean = span.iter().sum::<f64>() / m;
                    let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let invstd = 1.0 / (var + eps).sqrt();
                    means.data_mut()[bi * groups + g] = mean;
                    invstds.data_mut()[bi * groups + g] = invstd;
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let base = (bi * c + ch) * l;
                        for li in 0..l {
                            let xhat = (xd[base + li] - mean) * invstd;
                            od[base + li] = gd[ch] * xhat + bd[ch];
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            Op::GroupNorm { groups },
            vec![x, gamma, beta],
            out,
            vec![means, invstds],
            rg,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = GELU_C0 * (*v + GELU_C1 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Gelu, vec![x], out, vec![], rg)
    }

    /// Multi-head scaled dot-product attention. Rows of each head's softmax
    /// sum to one; the saved attention matrix is reused by the backward pass.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (qs, ks, vs) = (tq.shape(), tk.shape(), tv.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(CoreError::Shape("attention wants rank-3 q/k/v".into()));
        }
        let (b, t_q, d) = (qs[0], qs[1], qs[2]);
        let t_k = ks[1];
        if ks != [b, t_k, d] || vs != [b, t_k, d] {
            return Err(CoreError::Shape(format!(
                "attention: q {qs:?} k {ks:?} v {vs:?}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Shape(format!(
                "attention: dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[b, t_q, d]);
        let mut attn = Tensor::zeros(&[b, heads, t_q, t_k]);
        {
            let od = out.data_mut();
            let ad = attn.data_mut();
            let qd = tq.data();
            let kd = tk.data();
            let vd = tv.data();
            let mut scores = vec![0.0; t_k];
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t_q {
                        let qrow = &qd[(bi * t_q + i) * d + off..(bi * t_q + i) * d + off + dh];
                        let mut max = f64::NEG_INFINITY;
                        for (j, s) in scores.iter_mut().enumerate() {
                            let krow = &kd[(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            let mut dot = 0.0;
                            for e in 0..dh {
                                dot += qrow[e] * krow[e];
                            }
                            *s = dot * scale;
                            if *s > max {
                                max = *s;
                            }
                        }
                        let mut denom = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            denom += *s;
                        }
                        let abase = ((bi * heads + h) * t_q + i) * t_k;
                        for (j, &s) in scores.iter().enumerate() {
                            ad[abase + j] = s / denom;
                        }
                        let orow = &mut od[(bi * t_q + i) * d + off..(bi * t_q + i) * d + off + dh];
                        for j in 0..t_k {
                            let a = ad[abase + j];
                            let vrow = &vd[(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            for e in 0..dh {
                                orow[e] += a * vrow[e];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[q, k, v]);
        Ok(self.push(Op::Attention { heads }, vec![q, k, v], out, vec![attn], rg))
    }

    /// Mean squared error over unmasked entries. `mask` entries are 0 or 1.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor, mask: Tensor) -> Result<NodeId> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || tp.shape() != mask.shape() {
            return Err(CoreError::Shape(format!(
                "masked_mse: pred {:?} target {:?} mask {:?}",
                tp.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        let denom: f64 = mask.data().iter().sum();
        if denom == 0.0 {
            return Err(CoreError::Validation("masked_mse: all entries masked".into()));
        }
        let mut acc = 0.0;
        for ((&p, &t), &m) in tp.data().iter().zip(target.data()).zip(mask.data()) {
            let d = t - p;
            acc += m * d * d;
        }
        let out = Tensor::scalar_value(acc / denom);
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(Op::MaskedMse { target, mask }, vec![pred], out, vec![], rg))
    }

    /// Fixed-weight dot product reducing any tensor to a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape() != weights.shape() {
            return Err(CoreError::Shape(format!(
                "weighted_sum: {:?} vs {:?}",
                tx.shape(),
                weights.shape()
            )));
        }
        let acc: f64 = tx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let out = Tensor::scalar_value(acc);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::WeightedSum { weights }, vec![x], out, vec![], rg))
    }

    /// Reverse sweep from a scalar root. Gradients land on every node with
    /// `requires_grad`; fetch them via `grad` or `param_grads`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(CoreError::Shape("backward root must be scalar".into()));
        }
        self.nodes[root.0].grad = Some(Tensor::scalar_value(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            let grad = node.grad.as_ref().unwrap().clone();
            backprop(node, &grad, before);
        }
        Ok(())
    }

    /// Collect gradients of named parameter leaves.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &node.grad {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Tensor| {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn swap12(t: &Tensor, b: usize, a: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(&[b, c, a]);
    {
        let od = out.data_mut();
        let xd = t.data();
        for bi in 0..b {
            for ai in 0..a {
                for ci in 0..c {
                    od[(bi * c + ci) * a + ai] = xd[(bi * a + ai) * c + ci];
                }
            }
        }
    }
    out
}

/// Push `grad` through one node into its inputs (all at smaller indices).
fn backprop(node: &Node, grad: &Tensor, before: &mut [Node]) {
    let ins = &node.inputs;
    let needs: Vec<bool> = ins.iter().map(|id| before[id.0].requires_grad).collect();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add => {
            for slot in 0..2 {
                if needs[slot] {
                    let tgt = &mut before[ins[slot].0];
                    let shape = tgt.value.shape().to_vec();
                    let g = accumulate(&mut tgt.grad, &shape);
                    for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
            }
        }
        Op::AddBatchBcast => {
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let shape = tgt.value.shape().to_vec();
                let g = accumulate(&mut tgt.grad, &shape);
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            if needs[1] {
                let tgt = &mut before[ins[1].0];
                let shape = tgt.value.shape().to_vec();
                let inner: usize = shape.iter().product();
                let g = accumulate(&mut tgt.grad, &shape);
                for chunk in grad.data().chunks(inner) {
                    for (a, b) in g.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
        }
        Op::AddSeqBcast => {
            let xs = before[ins[0].0].value.shape().to_vec();
            let (b, t, d) = (xs[0], xs[1], xs[2]);
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                for (a, gv) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += gv;
                }
            }
            if needs[1] {
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &[b, d]);
                let gd = g.data_mut();
                for bi in 0..b {
                    for ti in 0..t {
                        let base = (bi * t + ti) * d;
                        for di in 0..d {
                            gd[bi * d + di] += grad.data()[base + di];
                        }
                    }
                }
            }
        }
        Op::Scale(f) => {
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let shape = tgt.value.shape().to_vec();
                let g = accumulate(&mut tgt.grad, &shape);
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += f * b;
                }
            }
        }
        Op::ScaleGrad(f) => {
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let shape = tgt.value.shape().to_vec();
                let g = accumulate(&mut tgt.grad, &shape);
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += f * b;
                }
            }
        }
        Op::SwapAxes12 => {
            if needs[0] {
                let xs = before[ins[0].0].value.shape().to_vec();
                let (b, a, c) = (xs[0], xs[1], xs[2]);
                // grad has shape [b, c, a]; swapping it back lands on x.
                let swapped = swap12(grad, b, c, a);
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                for (dst, src) in g.data_mut().iter_mut().zip(swapped.data()) {
                    *dst += src;
                }
            }
        }
        Op::Reshape { from } => {
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, from);
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
        }
        Op::ConcatChannels => {
            let sa = before[ins[0].0].value.shape().to_vec();
            let sb = before[ins[1].0].value.shape().to_vec();
            let (bn, c1, l) = (sa[0], sa[1], sa[2]);
            let c2 = sb[1];
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &sa);
                for bi in 0..bn {
                    let src = bi * (c1 + c2) * l;
                    for (a, b) in g.data_mut()[bi * c1 * l..(bi + 1) * c1 * l]
                        .iter_mut()
                        .zip(&grad.data()[src..src + c1 * l])
                    {
                        *a += b;
                    }
                }
            }
            if needs[1] {
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &sb);
                for bi in 0..bn {
                    let src = bi * (c1 + c2) * l + c1 * l;
                    for (a, b) in g.data_mut()[bi * c2 * l..(bi + 1) * c2 * l]
                        .iter_mut()
                        .zip(&grad.data()[src..src + c2 * l])
                    {
                        *a += b;
                    }
                }
            }
        }
        Op::MeanAxis1 => {
            if needs[0] {
                let xs = before[ins[0].0].value.shape().to_vec();
                let (b, t, d) = (xs[0], xs[1], xs[2]);
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                let inv = 1.0 / t as f64;
                for bi in 0..b {
                    for ti in 0..t {
                        let base = (bi * t + ti) * d;
                        for di in 0..d {
                            gd[base + di] += grad.data()[bi * d + di] * inv;
                        }
                    }
                }
            }
        }
        Op::Linear => {
            let ws = before[ins[1].0].value.shape().to_vec();
            let (d_out, d_in) = (ws[0], ws[1]);
            let rows = grad.len() / d_out;
            if needs[0] {
                let wdat = before[ins[1].0].value.clone();
                let xs = before[ins[0].0].value.shape().to_vec();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                for r in 0..rows {
                    let grow = &grad.data()[r * d_out..(r + 1) * d_out];
                    let xrow = &mut gd[r * d_in..(r + 1) * d_in];
                    for (j, &gv) in grow.iter().enumerate() {
                        let wrow = &wdat.data()[j * d_in..(j + 1) * d_in];
                        for i in 0..d_in {
                            xrow[i] += gv * wrow[i];
                        }
                    }
                }
            }
            if needs[1] {
                let xdat = before[ins[0].0].value.clone();
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &ws);
                let gd = g.data_mut();
                for r in 0..rows {
                    let grow = &grad.data()[r * d_out..(r + 1) * d_out];
                    let xrow = &xdat.data()[r * d_in..(r + 1) * d_in];
                    for (j, &gv) in grow.iter().enumerate() {
                        let wrow = &mut gd[j * d_in..(j + 1) * d_in];
                        for i in 0..d_in {
                            wrow[i] += gv * xrow[i];
                        }
                    }
                }
            }
            if needs[2] {
                let tgt = &mut before[ins[2].0];
                let g = accumulate(&mut tgt.grad, &[d_out]);
                let gd = g.data_mut();
                for r in 0..rows {
                    for j in 0..d_out {
                        gd[j] += grad.data()[r * d_out + j];
                    }
                }
            }
        }
        Op::Conv1d { stride, pad_left } => {
            let xs = before[ins[0].0].value.shape().to_vec();
            let ws = before[ins[1].0].value.shape().to_vec();
            let (bn, c_in, l) = (xs[0], xs[1], xs[2]);
            let (c_out, _, k) = (ws[0], ws[1], ws[2]);
            let out_len = grad.shape()[2];
            if needs[0] {
                let wdat = before[ins[1].0].value.clone();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for co in 0..c_out {
                        let grow = &grad.data()
                            [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let wrow = &wdat.data()[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            let xrow = &mut gd[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                            for (o, &gv) in grow.iter().enumerate() {
                                let start = (o * stride) as isize - *pad_left as isize;
                                for (kk, &wv) in wrow.iter().enumerate() {
                                    let i = start + kk as isize;
                                    if i >= 0 && (i as usize) < l {
                                        xrow[i as usize] += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if needs[1] {
                let xdat = before[ins[0].0].value.clone();
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &ws);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for co in 0..c_out {
                        let grow = &grad.data()
                            [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let xrow = &xdat.data()[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                            let wrow = &mut gd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            for (o, &gv) in grow.iter().enumerate() {
                                let start = (o * stride) as isize - *pad_left as isize;
                                for (kk, wslot) in wrow.iter_mut().enumerate() {
                                    let i = start + kk as isize;
                                    if i >= 0 && (i as usize) < l {
                                        *wslot += gv * xrow[i as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if needs[2] {
                let tgt = &mut before[ins[2].0];
                let g = accumulate(&mut tgt.grad, &[c_out]);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for co in 0..c_out {
                        let grow = &grad.data()
                            [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                        gd[co] += grow.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::ConvTranspose2x => {
            let xs = before[ins[0].0].value.shape().to_vec();
            let ws = before[ins[1].0].value.shape().to_vec();
            let (bn, c_in, l) = (xs[0], xs[1], xs[2]);
            let c_out = ws[1];
            let out_len = 2 * l;
            if needs[0] {
                let wdat = before[ins[1].0].value.clone();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for ci in 0..c_in {
                        let xrow = &mut gd[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                        for co in 0..c_out {
                            let grow = &grad.data()
                                [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                            let w0 = wdat.data()[(ci * c_out + co) * 2];
                            let w1 = wdat.data()[(ci * c_out + co) * 2 + 1];
                            for (i, slot) in xrow.iter_mut().enumerate() {
                                *slot += grow[2 * i] * w0 + grow[2 * i + 1] * w1;
                            }
                        }
                    }
                }
            }
            if needs[1] {
                let xdat = before[ins[0].0].value.clone();
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &ws);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for ci in 0..c_in {
                        let xrow = &xdat.data()[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                        for co in 0..c_out {
                            let grow = &grad.data()
                                [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                            let mut acc0 = 0.0;
                            let mut acc1 = 0.0;
                            for (i, &xv) in xrow.iter().enumerate() {
                                acc0 += xv * grow[2 * i];
                                acc1 += xv * grow[2 * i + 1];
                            }
                            gd[(ci * c_out + co) * 2] += acc0;
                            gd[(ci * c_out + co) * 2 + 1] += acc1;
                        }
                    }
                }
            }
            if needs[2] {
                let tgt = &mut before[ins[2].0];
                let g = accumulate(&mut tgt.grad, &[c_out]);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for co in 0..c_out {
                        let grow = &grad.data()
                            [(bi * c_out + co) * out_len..(bi * c_out + co + 1) * out_len];
                        gd[co] += grow.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::UpsampleLinear2x => {
            if needs[0] {
                let xs = before[ins[0].0].value.shape().to_vec();
                let (bn, c, l) = (xs[0], xs[1], xs[2]);
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                for row in 0..bn * c {
                    let grow = &grad.data()[row * 2 * l..(row + 1) * 2 * l];
                    let xrow = &mut gd[row * l..(row + 1) * l];
                    for i in 0..l {
                        xrow[i] += grow[2 * i] + 0.5 * grow[2 * i + 1];
                        let next = (i + 1).min(l - 1);
                        xrow[next] += 0.5 * grow[2 * i + 1];
                    }
                }
            }
        }
        Op::GroupNorm { groups } => {
            let xs = before[ins[0].0].value.shape().to_vec();
            let (bn, c, l) = (xs[0], xs[1], xs[2]);
            let cg = c / groups;
            let m = (cg * l) as f64;
            let means = node.saved[0].clone();
            let invstds = node.saved[1].clone();
            let xdat = before[ins[0].0].value.clone();
            let gdat = before[ins[1].0].value.clone();
            if needs[0] {
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for gi in 0..*groups {
                        let mean = means.data()[bi * groups + gi];
                        let invstd = invstds.data()[bi * groups + gi];
                        // two reductions over the group, then the pointwise map
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let base = (bi * c + ch) * l;
                            let gamma = gdat.data()[ch];
                            for li in 0..l {
                                let dxhat = grad.data()[base + li] * gamma;
                                let xhat = (xdat.data()[base + li] - mean) * invstd;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let base = (bi * c + ch) * l;
                            let gamma = gdat.data()[ch];
                            for li in 0..l {
                                let dxhat = grad.data()[base + li] * gamma;
                                let xhat = (xdat.data()[base + li] - mean) * invstd;
                                gd[base + li] += invstd
                                    * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                            }
                        }
                    }
                }
            }
            if needs[1] {
                let tgt = &mut before[ins[1].0];
                let g = accumulate(&mut tgt.grad, &[c]);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for ch in 0..c {
                        let gi = ch / cg;
                        let mean = means.data()[bi * groups + gi];
                        let invstd = invstds.data()[bi * groups + gi];
                        let base = (bi * c + ch) * l;
                        let mut acc = 0.0;
                        for li in 0..l {
                            let xhat = (xdat.data()[base + li] - mean) * invstd;
                            acc += grad.data()[base + li] * xhat;
                        }
                        gd[ch] += acc;
                    }
                }
            }
            if needs[2] {
                let tgt = &mut before[ins[2].0];
                let g = accumulate(&mut tgt.grad, &[c]);
                let gd = g.data_mut();
                for bi in 0..bn {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        gd[ch] += grad.data()[base..base + l].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::Gelu => {
            if needs[0] {
                let xdat = before[ins[0].0].value.clone();
                let xs = xdat.shape().to_vec();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &xs);
                for ((a, &x), &gv) in g.data_mut().iter_mut().zip(xdat.data()).zip(grad.data()) {
                    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
                    let th = u.tanh();
                    let sech2 = 1.0 - th * th;
                    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
                    *a += gv * (0.5 * (1.0 + th) + 0.5 * x * sech2 * du);
                }
            }
        }
        Op::Attention { heads } => {
            let qs = before[ins[0].0].value.shape().to_vec();
            let ks = before[ins[1].0].value.shape().to_vec();
            let (b, t_q, d) = (qs[0], qs[1], qs[2]);
            let t_k = ks[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let attn = node.saved[0].clone();
            let qdat = before[ins[0].0].value.clone();
            let kdat = before[ins[1].0].value.clone();
            let vdat = before[ins[2].0].value.clone();
            let mut dq = Tensor::zeros(&qs);
            let mut dk = Tensor::zeros(&ks);
            let mut dv = Tensor::zeros(&ks);
            let mut d_attn_row = vec![0.0; t_k];
            for bi in 0..b {
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t_q
                    {
                        let grow = &grad.data()[(bi * t_q + i) * d + off..(bi * t_q + i) * d + off + dh];
                        let abase = ((bi * heads + h) * t_q + i) * t_k;
                        // dA and dV
                        let mut dot_a_da = 0.0;
                        for j in 0..t_k {
                            let vrow =
                                &vdat.data()[(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            let mut da = 0.0;
                            for e in 0..dh {
                                da += grow[e] * vrow[e];
                            }
                            d_attn_row[j] = da;
                            dot_a_da += attn.data()[abase + j] * da;
                            let dvrow = &mut dv.data_mut()
                                [(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            let a = attn.data()[abase + j];
                            for e in 0..dh {
                                dvrow[e] += a * grow[e];
                            }
                        }
                        // softmax backward, then into q and k
                        let qrow =
                            &qdat.data()[(bi * t_q + i) * d + off..(bi * t_q + i) * d + off + dh];
                        for j in 0..t_k {
                            let a = attn.data()[abase + j];
                            let ds = a * (d_attn_row[j] - dot_a_da) * scale;
                            let krow =
                                &kdat.data()[(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            let dqrow = &mut dq.data_mut()
                                [(bi * t_q + i) * d + off..(bi * t_q + i) * d + off + dh];
                            for e in 0..dh {
                                dqrow[e] += ds * krow[e];
                            }
                            let dkrow = &mut dk.data_mut()
                                [(bi * t_k + j) * d + off..(bi * t_k + j) * d + off + dh];
                            for e in 0..dh {
                                dkrow[e] += ds * qrow[e];
                            }
                        }
                    }
                }
            }
            for (slot, delta) in [(0, dq), (1, dk), (2, dv)] {
                if needs[slot] {
                    let tgt = &mut before[ins[slot].0];
                    let shape = tgt.value.shape().to_vec();
                    let g = accumulate(&mut tgt.grad, &shape);
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
            }
        }
        Op::MaskedMse { target, mask } => {
            if needs[0] {
                let denom: f64 = mask.data().iter().sum();
                let upstream = grad.scalar();
                let shape = target.shape().to_vec();
                let pdat = before[ins[0].0].value.clone();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &shape);
                for (((a, &p), &t), &m) in g
                    .data_mut()
                    .iter_mut()
                    .zip(pdat.data())
                    .zip(target.data())
                    .zip(mask.data())
                {
                    *a += upstream * m * 2.0 * (p - t) / denom;
                }
            }
        }
        Op::WeightedSum { weights } => {
            if needs[0] {
                let upstream = grad.scalar();
                let shape = weights.shape().to_vec();
                let tgt = &mut before[ins[0].0];
                let g = accumulate(&mut tgt.grad, &shape);
                for (a, &w) in g.data_mut().iter_mut().zip(weights.data()) {
                    *a += upstream * w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1d_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn conv1d_stride2_halves_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 32]));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 16]);
    }

    #[test]
    fn conv1d_channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.conv1d(x, w, b, 1), Err(CoreError::Shape(_))));
    }

    #[test]
    fn upsample_doubles_and_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 2, 8], 3.25));
        let y = tape.upsample_linear_2x(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn attention_rows_sum_to_one_and_singleton_key_passes_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 3, 4], (0..12).map(|i| i as f64 / 7.0).collect()).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 4], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 1, 4], vec![5.0, -1.5, 2.0, 0.25]).unwrap());
        let y = tape.attention(q, k, v, 2).unwrap();
        // softmax over a single key is 1, so each query returns the value row
        for i in 0..3 {
            for e in 0..4 {
                assert!((tape.value(y).data()[i * 4 + e] - [5.0, -1.5, 2.0, 0.25][e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_over_identical_keys() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.4, -0.2]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = tape.constant(
            Tensor::new(vec![1, 3, 2], vec![0.0, 3.0, 6.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let y = tape.attention(q, k, v, 1).unwrap();
        assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_mse_ignores_masked_entries_bitwise() {
        let mask = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
        let t1 = Tensor::from_vec(vec![1.0, 100.0, 3.0]);
        let t2 = Tensor::from_vec(vec![1.0, -5.0e12, 3.0]);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![0.5, 0.0, 3.5]));
        let l1 = tape.masked_mse(p, t1, mask.clone()).unwrap();
        let mut tape2 = Tape::new();
        let p2 = tape2.leaf(Tensor::from_vec(vec![0.5, 0.0, 3.5]));
        let l2 = tape2.masked_mse(p2, t2, mask).unwrap();
        assert_eq!(tape.value(l1).scalar().to_bits(), tape2.value(l2).scalar().to_bits());
        tape.backward(l1).unwrap();
        tape2.backward(l2).unwrap();
        let g1 = tape.grad(p).unwrap();
        let g2 = tape2.grad(p2).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(g1.data()[1], 0.0);
    }

    #[test]
    fn all_masked_batch_is_an_error() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let err = tape.masked_mse(
            p,
            Tensor::from_vec(vec![0.0, 0.0]),
            Tensor::from_vec(vec![0.0, 0.0]),
        );
        assert!(matches!(err, Err(CoreError::Validation(_))));
    }
}
