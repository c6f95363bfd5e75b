//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Tape`] records every op of a forward pass in creation order, which is
//! already a topological order, so the backward sweep is a single reverse
//! replay that visits each recorded op exactly once. Tapes are rebuilt per
//! forward pass; parameters persist in a [`ParamStore`](super::ParamStore)
//! and are staged onto a tape as leaves, with leaf gradients merged back by
//! summation after backward.
//!
//! All math is f64. Every op output and every gradient contribution is
//! checked for finiteness; a NaN or infinity aborts with an error naming the
//! op that produced it.

use rayon::prelude::*;

use crate::error::{Result, SgError};
use crate::snn;

use super::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Firing rule of the spike op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Round half up: floor(clamp(v/vth, 0, L) + 0.5).
    Round,
    /// Whole threshold crossings: floor(clamp(v/vth, 0, L)).
    Crossings,
}

/// Threshold source for the spike op: a scalar node or a fixed constant.
#[derive(Clone, Copy, Debug)]
pub enum VthRef {
    Node(NodeId),
    Fixed(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    /// Broadcast multiply of a tensor by a single-element node.
    ScaleByNode { x: NodeId, s: NodeId },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// out[o, t] = sum_i w[o, i] * x[i, t] + b[o]; x may be rank 1.
    LinearCm { w: NodeId, x: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    DwConv2d { x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize },
    /// Per-channel y = x * scale[c] + bias[c] over the leading axis.
    ChannelAffine { x: NodeId, scale: NodeId, bias: NodeId },
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    MeanAll(NodeId),
    SumAll(NodeId),
    MaxAll(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    SliceRows { x: NodeId, r0: NodeId_range },
    SliceCols { x: NodeId, c0: usize, c1: usize },
    L2Normalize(NodeId),
    Detach(NodeId),
    Reshape(NodeId),
    Spike { v: NodeId, vth: VthRef, alpha: f64, levels: u32 },
}

/// Row range for a row slice; named to keep the op enum readable.
#[derive(Clone, Copy, Debug)]
#[allow(non_camel_case_types)]
struct NodeId_range {
    x_rows: (usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Work threshold above which matmul-family kernels parallelize over rows.
const PAR_WORK_THRESHOLD: usize = 200_000;

/// Reverse-mode autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    staged: Vec<(ParamId, NodeId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            staged: Vec::new(),
        }
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

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Create a leaf node. `needs_grad` marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Create a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    /// Stage every parameter of a store as leaves, in store order.
    pub fn stage_all(&mut self, store: &ParamStore) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(store.len());
        for pid in store.ids() {
            let p = store.get(pid);
            let node = self.leaf(p.value.clone(), p.learnable);
            self.staged.push((pid, node));
            ids.push(node);
        }
        ids
    }

    /// Add leaf gradients of staged parameters into the store (summation).
    pub fn collect_grads(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.staged {
            if let Some(g) = self.grads[node.0].as_ref() {
                let p = store.get_mut(pid);
                for (acc, v) in p.grad.iter_mut().zip(g.iter()) {
                    *acc += v;
                }
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(SgError::non_finite(op_name));
        }
        let needs = self.op_needs_grad(&op);
        Ok(self.push(value, op, needs))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let n = |id: &NodeId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Detach(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => n(a) || n(b),
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Recip(x)
            | Op::MeanAll(x)
            | Op::SumAll(x)
            | Op::MaxAll(x)
            | Op::L2Normalize(x)
            | Op::Reshape(x) => n(x),
            Op::Clamp { x, .. } => n(x),
            Op::ScaleByNode { x, s } => n(x) || n(s),
            Op::LinearCm { w, x, b } => n(w) || n(x) || n(b),
            Op::Conv2d { x, w, b, .. } => n(x) || n(w) || b.map(|b| n(&b)).unwrap_or(false),
            Op::DwConv2d { x, w, b, .. } => n(x) || n(w) || b.map(|b| n(&b)).unwrap_or(false),
            Op::ChannelAffine { x, scale, bias } => n(x) || n(scale) || n(bias),
            Op::Concat { parts, .. } => parts.iter().any(n),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => n(x),
            Op::Spike { v, vth, .. } => {
                n(v) || matches!(vth, VthRef::Node(t) if self.nodes[t.0].needs_grad)
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(SgError::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::raw(self.nodes[a.0].value.shape().to_vec(), data);
        self.push_checked("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::raw(self.nodes[a.0].value.shape().to_vec(), data);
        self.push_checked("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::raw(self.nodes[a.0].value.shape().to_vec(), data);
        self.push_checked("mul", t, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.map_unary(x, |a| a + c);
        self.push_checked("add_scalar", v, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.map_unary(x, |a| a * c);
        self.push_checked("scale", v, Op::Scale(x, c))
    }

    /// Multiply a tensor elementwise by a single-element node (broadcast).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(SgError::shape("scale_by", "scale node must be scalar"));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let v = self.map_unary(x, |a| a * sv);
        self.push_checked("scale_by", v, Op::ScaleByNode { x, s })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map_unary(x, sigmoid);
        self.push_checked("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map_unary(x, softplus);
        self.push_checked("softplus", v, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map_unary(x, f64::exp);
        self.push_checked("exp", v, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map_unary(x, f64::ln);
        self.push_checked("log", v, Op::Log(x))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map_unary(x, f64::recip);
        self.push_checked("recip", v, Op::Recip(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(SgError::invalid("clamp", format!("lo {} > hi {}", lo, hi)));
        }
        let v = self.map_unary(x, |a| a.clamp(lo, hi));
        self.push_checked("clamp", v, Op::Clamp { x, lo, hi })
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&a| f(a)).collect();
        Tensor::raw(src.shape().to_vec(), data)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        if src.numel() == 0 {
            return Err(SgError::invalid("mean_all", "empty tensor"));
        }
        let m = src.data().iter().sum::<f64>() / src.numel() as f64;
        self.push_checked("mean_all", Tensor::raw(vec![1], vec![m]), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data().iter().sum::<f64>();
        self.push_checked("sum_all", Tensor::raw(vec![1], vec![s]), Op::SumAll(x))
    }

    /// Max over all elements; gradient routes to the first maximum.
    pub fn max_all(&mut self, x: NodeId) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        if src.numel() == 0 {
            return Err(SgError::invalid("max_all", "empty tensor"));
        }
        let m = src.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.push_checked("max_all", Tensor::raw(vec![1], vec![m]), Op::MaxAll(x))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SgError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let t = Tensor::raw(vec![m, n], out);
        self.push_checked("matmul", t, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 2 {
            return Err(SgError::shape("transpose", format!("rank {} input", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::raw(vec![c, r], out);
        self.push_checked("transpose", t, Op::Transpose(x))
    }

    /// Channel-major linear layer: out[o, t] = sum_i w[o, i] x[i, t] + b[o].
    ///
    /// `x` may be rank 1 (a single column); the output then is rank 1 too.
    /// This is also the 1x1 convolution over a [channels, positions] map.
    pub fn linear_cm(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sw = self.nodes[w.0].value.shape().to_vec();
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sw.len() != 2 {
            return Err(SgError::shape("linear_cm", format!("weight rank {}", sw.len())));
        }
        let (o, i) = (sw[0], sw[1]);
        let (rows, cols, rank1) = match sx.len() {
            1 => (sx[0], 1usize, true),
            2 => (sx[0], sx[1], false),
            r => return Err(SgError::shape("linear_cm", format!("input rank {}", r))),
        };
        if rows != i || sb != [o] {
            return Err(SgError::shape(
                "linear_cm",
                format!("w {:?}, x {:?}, b {:?}", sw, sx, sb),
            ));
        }
        let wv = self.nodes[w.0].value.data();
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; o * cols];
        linear_cm_into(wv, xv, bv, &mut out, o, i, cols);
        let shape = if rank1 { vec![o] } else { vec![o, cols] };
        let t = Tensor::raw(shape, out);
        self.push_checked("linear_cm", t, Op::LinearCm { w, x, b })
    }

    // ---- convolutions ----

    /// 2D convolution: x [c_in, h, w], weight [c_out, c_in, kh, kw], zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(SgError::shape("conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        if stride == 0 {
            return Err(SgError::invalid("conv2d", "stride must be positive"));
        }
        let (cin, h, wth) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wth + 2 * pad < kw {
            return Err(SgError::shape("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wth + 2 * pad - kw) / stride + 1;
        if let Some(bn) = b {
            if self.nodes[bn.0].value.shape() != [cout] {
                return Err(SgError::shape("conv2d", "bias shape"));
            }
        }
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let base = if let Some(bn) = b {
                self.nodes[bn.0].value.data()[co]
            } else {
                0.0
            };
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wth as isize {
                                    continue;
                                }
                                acc += xv[(ci * h + iy as usize) * wth + ix as usize]
                                    * wv[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let t = Tensor::raw(vec![cout, oh, ow], out);
        self.push_checked("conv2d", t, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Depthwise 2D convolution: x [c, h, w], weight [c, kh, kw], stride 1.
    pub fn dw_conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[0] != sw[0] {
            return Err(SgError::shape("dw_conv2d", format!("x {:?}, w {:?}", sx, sw)));
        }
        let (c, h, wth) = (sx[0], sx[1], sx[2]);
        let (kh, kw) = (sw[1], sw[2]);
        if h + 2 * pad < kh || wth + 2 * pad < kw {
            return Err(SgError::shape("dw_conv2d", "kernel larger than padded input"));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = wth + 2 * pad - kw + 1;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let base = if let Some(bn) = b {
                self.nodes[bn.0].value.data()[ch]
            } else {
                0.0
            };
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wth as isize {
                                continue;
                            }
                            acc += xv[(ch * h + iy as usize) * wth + ix as usize]
                                * wv[(ch * kh + ky) * kw + kx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let t = Tensor::raw(vec![c, oh, ow], out);
        self.push_checked("dw_conv2d", t, Op::DwConv2d { x, w, b, pad })
    }

    /// Per-channel affine over the leading axis: y = x * scale[c] + bias[c].
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.is_empty() {
            return Err(SgError::shape("channel_affine", "rank-0 input"));
        }
        let c = sx[0];
        let inner: usize = sx[1..].iter().product::<usize>().max(1);
        if self.nodes[scale.0].value.shape() != [c] || self.nodes[bias.0].value.shape() != [c] {
            return Err(SgError::shape("channel_affine", "scale/bias shape"));
        }
        let xv = self.nodes[x.0].value.data();
        let sv = self.nodes[scale.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let (s, bb) = (sv[ch], bv[ch]);
            for t in 0..inner {
                out[ch * inner + t] = xv[ch * inner + t] * s + bb;
            }
        }
        let t = Tensor::raw(sx, out);
        self.push_checked("channel_affine", t, Op::ChannelAffine { x, scale, bias })
    }

    // ---- structure ops ----

    /// Concatenate along `axis` (0 for rank 1; 0 or 1 for rank 2).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SgError::invalid("concat", "no parts"));
        }
        let rank = self.nodes[parts[0].0].value.shape().len();
        if axis >= rank.max(1) || rank > 2 {
            return Err(SgError::invalid("concat", format!("axis {} on rank {}", axis, rank)));
        }
        let t = if rank <= 1 || (rank == 2 && axis == 0) {
            // Row-major stacking: payloads concatenate directly.
            let mut data = Vec::new();
            let mut lead = 0usize;
            let tail: Vec<usize> = self.nodes[parts[0].0].value.shape()[1..].to_vec();
            for p in parts {
                let s = self.nodes[p.0].value.shape();
                if s[1..] != tail[..] {
                    return Err(SgError::shape("concat", "trailing dims differ"));
                }
                lead += s[0];
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(&tail);
            Tensor::raw(shape, data)
        } else {
            // axis 1 on rank 2: interleave rows.
            let rows = self.nodes[parts[0].0].value.shape()[0];
            let mut total_cols = 0usize;
            for p in parts {
                let s = self.nodes[p.0].value.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(SgError::shape("concat", "row counts differ"));
                }
                total_cols += s[1];
            }
            let mut data = vec![0.0; rows * total_cols];
            let mut col_off = 0usize;
            for p in parts {
                let s = self.nodes[p.0].value.shape();
                let cols = s[1];
                let src = self.nodes[p.0].value.data();
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + cols]
                        .copy_from_slice(&src[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
            Tensor::raw(vec![rows, total_cols], data)
        };
        self.push_checked(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous row range [r0, r1) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if s.len() != 2 || r1 > s[0] || r0 >= r1 {
            return Err(SgError::invalid(
                "slice_rows",
                format!("range {}..{} of {:?}", r0, r1, s),
            ));
        }
        let cols = s[1];
        let data = self.nodes[x.0].value.data()[r0 * cols..r1 * cols].to_vec();
        let t = Tensor::raw(vec![r1 - r0, cols], data);
        self.push_checked(
            "slice_rows",
            t,
            Op::SliceRows {
                x,
                r0: NodeId_range { x_rows: (r0, r1) },
            },
        )
    }

    /// Column range [c0, c1) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if s.len() != 2 || c1 > s[1] || c0 >= c1 {
            return Err(SgError::invalid(
                "slice_cols",
                format!("range {}..{} of {:?}", c0, c1, s),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let w = c1 - c0;
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&src[r * cols + c0..r * cols + c1]);
        }
        let t = Tensor::raw(vec![rows, w], data);
        self.push_checked("slice_cols", t, Op::SliceCols { x, c0, c1 })
    }

    /// L2-normalize a rank-1 vector; near-zero vectors pass through unscaled.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape();
        if s.len() != 1 {
            return Err(SgError::shape("l2_normalize", format!("rank {}", s.len())));
        }
        let src = self.nodes[x.0].value.data();
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        let data = if norm < 1e-12 {
            src.to_vec()
        } else {
            src.iter().map(|v| v / norm).collect()
        };
        let t = Tensor::raw(s.to_vec(), data);
        self.push_checked("l2_normalize", t, Op::L2Normalize(x))
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.nodes[x.0].value.clone();
        self.push_checked("detach", t, Op::Detach(x))
    }

    /// Same payload under a new shape with equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(SgError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.0].value.shape(), shape),
            ));
        }
        let t = Tensor::raw(shape, self.nodes[x.0].value.data().to_vec());
        self.push_checked("reshape", t, Op::Reshape(x))
    }

    /// Multispike firing with ATan surrogate backward.
    ///
    /// Forward per element: s = floor(clamp(v/vth, 0, L) [+ 0.5 for Round]).
    /// Backward: dv += ds * S(v/vth) / vth where S is the surrogate sum; a
    /// threshold node also receives ds * S(u) * (-u / vth).
    pub fn spike(
        &mut self,
        v: NodeId,
        vth: VthRef,
        mode: SpikeMode,
        alpha: f64,
        levels: u32,
    ) -> Result<NodeId> {
        let vth_val = match vth {
            VthRef::Node(t) => {
                let tv = &self.nodes[t.0].value;
                if tv.numel() != 1 {
                    return Err(SgError::shape("spike", "threshold node must be scalar"));
                }
                tv.data()[0]
            }
            VthRef::Fixed(f) => f,
        };
        if vth_val <= 0.0 {
            return Err(SgError::invalid("spike", "threshold must be positive"));
        }
        let src = &self.nodes[v.0].value;
        let l = levels as f64;
        let data: Vec<f64> = src
            .data()
            .iter()
            .map(|&x| {
                let u = (x / vth_val).clamp(0.0, l);
                match mode {
                    SpikeMode::Round => (u + 0.5).floor(),
                    SpikeMode::Crossings => u.floor(),
                }
            })
            .collect();
        let t = Tensor::raw(src.shape().to_vec(), data);
        self.push_checked(
            "spike",
            t,
            Op::Spike {
                v,
                vth,
                alpha,
                levels,
            },
        )
    }

    /// Single element of a rank-1 vector as a scalar node.
    pub fn slice_of(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let s = self.nodes[x.0].value.shape().to_vec();
        if s.len() != 1 || i >= s[0] {
            return Err(SgError::invalid("slice_of", format!("index {} of {:?}", i, s)));
        }
        let col = self.reshape(x, vec![s[0], 1])?;
        let row = self.slice_rows(col, i, i + 1)?;
        self.reshape(row, vec![1])
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss node (seed gradient 1).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SgError::invalid(
                "backward",
                "loss must be a single-element tensor",
            ));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        self.sweep(loss.0)
    }

    /// Backpropagate from externally seeded cotangents (batch coupling).
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Vec<f64>)]) -> Result<()> {
        let mut start = 0usize;
        for (id, seed) in seeds {
            if seed.len() != self.nodes[id.0].value.numel() {
                return Err(SgError::shape("backward_seeded", "seed length"));
            }
            let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (g, s) in slot.iter_mut().zip(seed) {
                *g += s;
            }
            start = start.max(id.0);
        }
        self.sweep(start)
    }

    fn sweep(&mut self, start: usize) -> Result<()> {
        for idx in (0..=start).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            let name = self.backward_op(idx, &op, &gout)?;
            // Scan freshly accumulated input grads so a backward NaN names its op.
            for input in op_inputs(&op) {
                if let Some(g) = self.grads[input.0].as_ref() {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(SgError::non_finite(name));
                    }
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gout: &[f64]) -> Result<&'static str> {
        match *op {
            Op::Leaf | Op::Detach(_) => Ok("leaf"),
            Op::Add(a, b) => {
                self.accum(a, |g| axpy(g, gout, 1.0));
                self.accum(b, |g| axpy(g, gout, 1.0));
                Ok("add")
            }
            Op::Sub(a, b) => {
                self.accum(a, |g| axpy(g, gout, 1.0));
                self.accum(b, |g| axpy(g, gout, -1.0));
                Ok("sub")
            }
            Op::Mul(a, b) => {
                let av: Vec<f64> = self.nodes[a.0].value.data().to_vec();
                let bv: Vec<f64> = self.nodes[b.0].value.data().to_vec();
                self.accum(a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.accum(b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
                Ok("mul")
            }
            Op::AddScalar(x) => {
                self.accum(x, |g| axpy(g, gout, 1.0));
                Ok("add_scalar")
            }
            Op::Scale(x, c) => {
                self.accum(x, |g| axpy(g, gout, c));
                Ok("scale")
            }
            Op::ScaleByNode { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| axpy(g, gout, sv));
                self.accum(s, |g| {
                    g[0] += gout.iter().zip(&xv).map(|(go, x)| go * x).sum::<f64>();
                });
                Ok("scale_by")
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av: Vec<f64> = self.nodes[a.0].value.data().to_vec();
                let bv: Vec<f64> = self.nodes[b.0].value.data().to_vec();
                self.accum(a, |g| {
                    // da[i, p] += sum_j gout[i, j] * b[p, j]
                    let body = |i: usize, row: &mut [f64]| {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * bv[p * n + j];
                            }
                            row[p] += acc;
                        }
                    };
                    run_rows(g, k, m * k * n, body);
                });
                self.accum(b, |g| {
                    // db[p, j] += sum_i a[i, p] * gout[i, j]
                    let body = |p: usize, row: &mut [f64]| {
                        for i in 0..m {
                            let w = av[i * k + p];
                            if w != 0.0 {
                                for j in 0..n {
                                    row[j] += w * gout[i * n + j];
                                }
                            }
                        }
                    };
                    run_rows(g, n, m * k * n, body);
                });
                Ok("matmul")
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (r, c) = (s[0], s[1]);
                self.accum(x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
                Ok("transpose")
            }
            Op::LinearCm { w, x, b } => {
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (o, i) = (sw[0], sw[1]);
                let cols = self.nodes[x.0].value.numel() / i;
                let wv: Vec<f64> = self.nodes[w.0].value.data().to_vec();
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(w, |g| {
                    // dw[o, i] += sum_t gout[o, t] * x[i, t]
                    let body = |oo: usize, row: &mut [f64]| {
                        for ii in 0..i {
                            let mut acc = 0.0;
                            for t in 0..cols {
                                acc += gout[oo * cols + t] * xv[ii * cols + t];
                            }
                            row[ii] += acc;
                        }
                    };
                    run_rows(g, i, o * i * cols, body);
                });
                self.accum(x, |g| {
                    // dx[i, t] += sum_o w[o, i] * gout[o, t]
                    let body = |ii: usize, row: &mut [f64]| {
                        for oo in 0..o {
                            let wgt = wv[oo * i + ii];
                            if wgt != 0.0 {
                                for t in 0..cols {
                                    row[t] += wgt * gout[oo * cols + t];
                                }
                            }
                        }
                    };
                    run_rows(g, cols, o * i * cols, body);
                });
                self.accum(b, |g| {
                    for oo in 0..o {
                        g[oo] += gout[oo * cols..(oo + 1) * cols].iter().sum::<f64>();
                    }
                });
                Ok("linear_cm")
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (cin, h, wth) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wth + 2 * pad - kw) / stride + 1;
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                let wv: Vec<f64> = self.nodes[w.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[(co * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            db[co] += g;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wth as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * wth + ix as usize;
                                        let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                        dx[xi] += g * wv[wi];
                                        dw[wi] += g * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(x, |gr| axpy(gr, &dx, 1.0));
                self.accum(w, |gr| axpy(gr, &dw, 1.0));
                if let Some(bn) = b {
                    self.accum(bn, |gr| axpy(gr, &db, 1.0));
                }
                Ok("conv2d")
            }
            Op::DwConv2d { x, w, b, pad } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let sw = self.nodes[w.0].value.shape().to_vec();
                let (c, h, wth) = (sx[0], sx[1], sx[2]);
                let (kh, kw) = (sw[1], sw[2]);
                let oh = h + 2 * pad - kh + 1;
                let ow = wth + 2 * pad - kw + 1;
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                let wv: Vec<f64> = self.nodes[w.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gout[(ch * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            db[ch] += g;
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wth as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + iy as usize) * wth + ix as usize;
                                    let wi = (ch * kh + ky) * kw + kx;
                                    dx[xi] += g * wv[wi];
                                    dw[wi] += g * xv[xi];
                                }
                            }
                        }
                    }
                }
                self.accum(x, |gr| axpy(gr, &dx, 1.0));
                self.accum(w, |gr| axpy(gr, &dw, 1.0));
                if let Some(bn) = b {
                    self.accum(bn, |gr| axpy(gr, &db, 1.0));
                }
                Ok("dw_conv2d")
            }
            Op::ChannelAffine { x, scale, bias } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let c = sx[0];
                let inner: usize = sx[1..].iter().product::<usize>().max(1);
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                let sv: Vec<f64> = self.nodes[scale.0].value.data().to_vec();
                self.accum(x, |g| {
                    for ch in 0..c {
                        let s = sv[ch];
                        for t in 0..inner {
                            g[ch * inner + t] += gout[ch * inner + t] * s;
                        }
                    }
                });
                self.accum(scale, |g| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for t in 0..inner {
                            acc += gout[ch * inner + t] * xv[ch * inner + t];
                        }
                        g[ch] += acc;
                    }
                });
                self.accum(bias, |g| {
                    for ch in 0..c {
                        g[ch] += gout[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                    }
                });
                Ok("channel_affine")
            }
            Op::Sigmoid(x) => {
                let yv: Vec<f64> = self.nodes[idx].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
                Ok("sigmoid")
            }
            Op::Softplus(x) => {
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sigmoid(xv[i]);
                    }
                });
                Ok("softplus")
            }
            Op::Exp(x) => {
                let yv: Vec<f64> = self.nodes[idx].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * yv[i];
                    }
                });
                Ok("exp")
            }
            Op::Log(x) => {
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / xv[i];
                    }
                });
                Ok("log")
            }
            Op::Recip(x) => {
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] / (xv[i] * xv[i]);
                    }
                });
                Ok("recip")
            }
            Op::Clamp { x, lo, hi } => {
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        if xv[i] >= lo && xv[i] <= hi {
                            g[i] += gout[i];
                        }
                    }
                });
                Ok("clamp")
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                let g0 = gout[0] / n;
                self.accum(x, |g| {
                    for v in g.iter_mut() {
                        *v += g0;
                    }
                });
                Ok("mean_all")
            }
            Op::SumAll(x) => {
                let g0 = gout[0];
                self.accum(x, |g| {
                    for v in g.iter_mut() {
                        *v += g0;
                    }
                });
                Ok("sum_all")
            }
            Op::MaxAll(x) => {
                let xv = self.nodes[x.0].value.data();
                let mut best = 0usize;
                for (i, &v) in xv.iter().enumerate() {
                    if v > xv[best] {
                        best = i;
                    }
                }
                let g0 = gout[0];
                self.accum(x, |g| {
                    g[best] += g0;
                });
                Ok("max_all")
            }
            Op::Concat { ref parts, axis } => {
                let rank = self.nodes[parts[0].0].value.shape().len();
                if rank <= 1 || axis == 0 {
                    let mut off = 0usize;
                    for p in parts.clone() {
                        let n = self.nodes[p.0].value.numel();
                        let seg = gout[off..off + n].to_vec();
                        self.accum(p, |g| axpy(g, &seg, 1.0));
                        off += n;
                    }
                } else {
                    let rows = self.nodes[parts[0].0].value.shape()[0];
                    let total_cols: usize = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.shape()[1])
                        .sum();
                    let mut col_off = 0usize;
                    for p in parts.clone() {
                        let cols = self.nodes[p.0].value.shape()[1];
                        let mut seg = vec![0.0; rows * cols];
                        for r in 0..rows {
                            seg[r * cols..(r + 1) * cols].copy_from_slice(
                                &gout[r * total_cols + col_off..r * total_cols + col_off + cols],
                            );
                        }
                        self.accum(p, |g| axpy(g, &seg, 1.0));
                        col_off += cols;
                    }
                }
                Ok("concat")
            }
            Op::SliceRows { x, r0 } => {
                let (a, b) = r0.x_rows;
                let cols = self.nodes[x.0].value.shape()[1];
                self.accum(x, |g| {
                    g[a * cols..b * cols]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(gi, go)| *gi += go);
                });
                Ok("slice_rows")
            }
            Op::SliceCols { x, c0, c1 } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (rows, cols) = (s[0], s[1]);
                let w = c1 - c0;
                self.accum(x, |g| {
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * cols + c0 + j] += gout[r * w + j];
                        }
                    }
                });
                Ok("slice_cols")
            }
            Op::L2Normalize(x) => {
                let xv: Vec<f64> = self.nodes[x.0].value.data().to_vec();
                let yv: Vec<f64> = self.nodes[idx].value.data().to_vec();
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                self.accum(x, |g| {
                    if norm < 1e-12 {
                        axpy(g, gout, 1.0);
                    } else {
                        let dot: f64 = yv.iter().zip(gout).map(|(y, go)| y * go).sum();
                        for i in 0..g.len() {
                            g[i] += (gout[i] - yv[i] * dot) / norm;
                        }
                    }
                });
                Ok("l2_normalize")
            }
            Op::Reshape(x) => {
                self.accum(x, |g| axpy(g, gout, 1.0));
                Ok("reshape")
            }
            Op::Spike {
                v,
                vth,
                alpha,
                levels,
            } => {
                let vth_val = match vth {
                    VthRef::Node(t) => self.nodes[t.0].value.data()[0],
                    VthRef::Fixed(f) => f,
                };
                let vv: Vec<f64> = self.nodes[v.0].value.data().to_vec();
                self.accum(v, |g| {
                    for i in 0..g.len() {
                        let u = vv[i] / vth_val;
                        g[i] += gout[i] * snn::surrogate_sum(u, alpha, levels) / vth_val;
                    }
                });
                if let VthRef::Node(t) = vth {
                    self.accum(t, |g| {
                        let mut acc = 0.0;
                        for i in 0..vv.len() {
                            let u = vv[i] / vth_val;
                            acc += gout[i] * snn::surrogate_sum(u, alpha, levels) * (-u / vth_val);
                        }
                        g[0] += acc;
                    });
                }
                Ok("spike")
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
        Op::AddScalar(x)
        | Op::Scale(x, _)
        | Op::Transpose(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Recip(x)
        | Op::MeanAll(x)
        | Op::SumAll(x)
        | Op::MaxAll(x)
        | Op::L2Normalize(x)
        | Op::Detach(x)
        | Op::Reshape(x) => vec![x],
        Op::Clamp { x, .. } => vec![x],
        Op::ScaleByNode { x, s } => vec![x, s],
        Op::LinearCm { w, x, b } => vec![w, x, b],
        Op::Conv2d { x, w, b, .. } | Op::DwConv2d { x, w, b, .. } => {
            let mut v = vec![x, w];
            if let Some(bn) = b {
                v.push(bn);
            }
            v
        }
        Op::ChannelAffine { x, scale, bias } => vec![x, scale, bias],
        Op::Concat { ref parts, .. } => parts.clone(),
        Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![x],
        Op::Spike { v, vth, .. } => {
            let mut ids = vec![v];
            if let VthRef::Node(t) = vth {
                ids.push(t);
            }
            ids
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// out[m, n] = a[m, k] * b[k, n]; rows parallelize above the work threshold.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += av * brow[j];
                }
            }
        }
    };
    run_rows(out, n, m * k * n, body);
}

fn linear_cm_into(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64], o: usize, i: usize, cols: usize) {
    let body = |oo: usize, row: &mut [f64]| {
        row.iter_mut().for_each(|v| *v = b[oo]);
        for ii in 0..i {
            let wv = w[oo * i + ii];
            if wv != 0.0 {
                let xrow = &x[ii * cols..(ii + 1) * cols];
                for t in 0..cols {
                    row[t] += wv * xrow[t];
                }
            }
        }
    };
    run_rows(out, cols, o * i * cols, body);
}

/// Apply `body` to each `row_len` chunk; parallel when `work` is large.
/// Each row is computed by one thread with a fixed-order inner loop, so
/// results are bitwise identical regardless of thread count.
fn run_rows(buf: &mut [f64], row_len: usize, work: usize, body: impl Fn(usize, &mut [f64]) + Sync) {
    if work > PAR_WORK_THRESHOLD && buf.len() > row_len {
        buf.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in buf.chunks_mut(row_len).enumerate() {
            body(i, row);
        }
    }
}
