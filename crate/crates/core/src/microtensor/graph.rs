use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvDims, ConvGeom};
use super::{ParamId, ParamStore, Shape4, Tensor4};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind of a node, for graph introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Input,
    Param,
    Constant,
    Conv2d,
    MaxPool3,
    AvgPool3,
    Add,
    WeightedSum,
    Concat,
    SliceChannels,
    Resize,
    GlobalAvgPool,
    BatchNorm,
    Relu,
    Softmax,
    CrossEntropy,
    Sum,
    Mul,
    Scale,
}

enum Op {
    Input,
    Param(ParamId),
    Constant,
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool3 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool3 {
        x: NodeId,
    },
    Add(Vec<NodeId>),
    WeightedSum(Vec<(NodeId, NodeId, usize)>),
    Concat(Vec<NodeId>),
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    Resize {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<u8>,
        ignore: Option<u8>,
        count: usize,
    },
    Sum {
        x: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Input => OpTag::Input,
            Op::Param(_) => OpTag::Param,
            Op::Constant => OpTag::Constant,
            Op::Conv2d { .. } => OpTag::Conv2d,
            Op::MaxPool3 { .. } => OpTag::MaxPool3,
            Op::AvgPool3 { .. } => OpTag::AvgPool3,
            Op::Add(_) => OpTag::Add,
            Op::WeightedSum(_) => OpTag::WeightedSum,
            Op::Concat(_) => OpTag::Concat,
            Op::SliceChannels { .. } => OpTag::SliceChannels,
            Op::Resize { .. } => OpTag::Resize,
            Op::GlobalAvgPool { .. } => OpTag::GlobalAvgPool,
            Op::BatchNorm { .. } => OpTag::BatchNorm,
            Op::Relu { .. } => OpTag::Relu,
            Op::Softmax { .. } => OpTag::Softmax,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
            Op::Sum { .. } => OpTag::Sum,
            Op::Mul { .. } => OpTag::Mul,
            Op::Scale { .. } => OpTag::Scale,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => vec![],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::MaxPool3 { x, .. }
            | Op::AvgPool3 { x }
            | Op::SliceChannels { x, .. }
            | Op::Resize { x }
            | Op::GlobalAvgPool { x }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Add(xs) | Op::Concat(xs) => xs.clone(),
            Op::WeightedSum(terms) => terms.iter().flat_map(|&(x, w, _)| [x, w]).collect(),
            Op::BatchNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma);
                v.extend(beta);
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mul { a, b } => vec![*a, *b],
        }
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, NodeId>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor4, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Input | Op::Constant => false,
            Op::Param(_) => true,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node, in tape order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape4 {
        self.nodes[id.0].value.shape()
    }

    pub fn op_tag(&self, id: NodeId) -> OpTag {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf holding data that is not differentiated.
    pub fn input(&mut self, t: Tensor4) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Leaf that is not a parameter but still receives a gradient.
    pub fn input_with_grad(&mut self, t: Tensor4) -> NodeId {
        let id = self.push(t, Op::Input);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Leaf for a stored parameter. Repeated requests return the same node,
    /// so every use of the parameter shares one gradient accumulator.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, n);
        n
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    /// The parameter a leaf node was created from.
    pub fn param_of(&self, node: NodeId) -> Option<ParamId> {
        match self.nodes[node.0].op {
            Op::Param(p) => Some(p),
            _ => None,
        }
    }

    pub fn identity(&mut self, x: NodeId) -> NodeId {
        x
    }

    /// All-zero tensor shaped like `x`, with no gradient path.
    pub fn zero_op(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Tensor4::zeros(shape), Op::Constant)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w || ws.h.is_multiple_of(2) || groups == 0 || stride == 0 || dilation == 0 {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if !xs.c.is_multiple_of(groups) || !ws.n.is_multiple_of(groups) || ws.c * groups != xs.c {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::shape("conv2d bias", ws, bs));
            }
        }
        let geom = ConvGeom {
            kernel: ws.h,
            stride,
            dilation,
            groups,
        };
        let dims = ConvDims {
            n: xs.n,
            c_in: xs.c,
            h: xs.h,
            w: xs.w,
            c_out: ws.n,
            h_out: geom.out_len(xs.h),
            w_out: geom.out_len(xs.w),
        };
        let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, dims.h_out, dims.w_out));
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &dims,
            &geom,
            out.data_mut(),
        );
        if let Some(b) = bias {
            let plane = dims.h_out * dims.w_out;
            let bv = self.value(b).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let v = bv[i % ws.n];
                chunk.iter_mut().for_each(|o| *o += v);
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }))
    }

    /// Depthwise `k x k` convolution (dilated) followed by a 1x1 pointwise convolution.
    pub fn separable_conv(
        &mut self,
        x: NodeId,
        depthwise: NodeId,
        pointwise: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let c = self.shape(x).c;
        let dw = self.conv2d(x, depthwise, None, 1, dilation, c)?;
        self.conv2d(dw, pointwise, None, 1, 1, 1)
    }

    pub fn max_pool_3x3(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let mut out = Tensor4::zeros(s);
        let argmax =
            kernels::max_pool3_forward(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        self.push(out, Op::MaxPool3 { x, argmax })
    }

    pub fn avg_pool_3x3(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let mut out = Tensor4::zeros(s);
        kernels::avg_pool3_forward(self.value(x).data(), s.n * s.c, s.h, s.w, out.data_mut());
        self.push(out, Op::AvgPool3 { x })
    }

    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("add of zero tensors"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first);
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            if self.shape(x) != shape {
                return Err(Error::shape("add", shape, self.shape(x)));
            }
            add_into(out.data_mut(), self.value(x).data());
        }
        Ok(self.push(out, Op::Add(xs.to_vec())))
    }

    /// `sum_k w_k[idx_k] * x_k` where each weight is one element of a (possibly shared) node.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, NodeId, usize)]) -> Result<NodeId> {
        let &(first, _, _) = terms
            .first()
            .ok_or_else(|| Error::invalid("weighted sum of zero tensors"))?;
        let shape = self.shape(first);
        let mut out = Tensor4::zeros(shape);
        for &(x, w, idx) in terms {
            if self.shape(x) != shape {
                return Err(Error::shape("weighted_sum", shape, self.shape(x)));
            }
            let wv = *self
                .value(w)
                .data()
                .get(idx)
                .ok_or_else(|| Error::invalid(format!("weight index {idx} out of range")))?;
            for (o, v) in out.data_mut().iter_mut().zip(self.value(x).data()) {
                *o += wv * v;
            }
        }
        Ok(self.push(out, Op::WeightedSum(terms.to_vec())))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(
            *xs.first()
                .ok_or_else(|| Error::invalid("concat of zero tensors"))?,
        );
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", first, s));
            }
            c_total += s.c;
        }
        let plane = first.plane();
        let mut data = Vec::with_capacity(first.n * c_total * plane);
        for n in 0..first.n {
            for &x in xs {
                let s = self.shape(x);
                let base = n * s.c * plane;
                data.extend_from_slice(&self.value(x).data()[base..base + s.c * plane]);
            }
        }
        let out = Tensor4::from_vec(Shape4::new(first.n, c_total, first.h, first.w), data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                s,
                Shape4::new(s.n, len, s.h, s.w),
            ));
        }
        let out = self.value(x).channel_slice(start, len);
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    pub fn bilinear_upsample_x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        self.bilinear_resize(x, 2 * s.h, 2 * s.w)
    }

    /// Half-pixel-centred bilinear resize to `(h, w)`.
    pub fn bilinear_resize(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if h == 0 || w == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                s,
                Shape4::new(s.n, s.c, h, w),
            ));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(x);
        }
        let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
        kernels::bilinear_forward(
            self.value(x).data(),
            s.n * s.c,
            (s.h, s.w),
            (h, w),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Resize { x }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let plane = s.plane();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), data).unwrap();
        self.push(out, Op::GlobalAvgPool { x })
    }

    /// Batch normalization with current-batch statistics; `gamma`/`beta`
    /// are optional per-channel scale and shift.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let s = self.shape(x);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p).numel() != s.c {
                return Err(Error::shape("batch_norm", s, self.shape(p)));
            }
        }
        let plane = s.plane();
        let m = (s.n * plane) as f64;
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; s.numel()];
        let mut inv_std = vec![0.0; s.c];
        for c in 0..s.c {
            let mut mean = 0.0;
            for n in 0..s.n {
                mean += xv[(n * s.c + c) * plane..][..plane].iter().sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for n in 0..s.n {
                var += xv[(n * s.c + c) * plane..][..plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= m;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            for n in 0..s.n {
                let off = (n * s.c + c) * plane;
                for i in off..off + plane {
                    xhat[i] = (xv[i] - mean) * is;
                }
            }
        }
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let c = i % s.c;
            let g = gv.as_ref().map_or(1.0, |g| g[c]);
            let b = bv.as_ref().map_or(0.0, |b| b[c]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let out = Tensor4::from_vec(s, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    /// Softmax across the channel axis at every (n, h, w). Entries with
    /// `mask[i] == false` are excluded and come out exactly zero; a group
    /// with every entry masked is all zeros.
    pub fn softmax_over_channel(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let s = self.shape(x);
        if let Some(m) = mask {
            if m.len() != s.numel() {
                return Err(Error::invalid(format!(
                    "softmax mask has {} entries for shape {s}",
                    m.len()
                )));
            }
        }
        let plane = s.plane();
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let live = |c: usize| mask.is_none_or(|m| m[idx(c)]);
                let max = (0..s.c)
                    .filter(|&c| live(c))
                    .map(|c| xv[idx(c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    // fully masked group: stays all-zero
                    continue;
                }
                let mut z = 0.0;
                for c in (0..s.c).filter(|&c| live(c)) {
                    let e = (xv[idx(c)] - max).exp();
                    out[idx(c)] = e;
                    z += e;
                }
                for c in (0..s.c).filter(|&c| live(c)) {
                    out[idx(c)] /= z;
                }
            }
        }
        let out = Tensor4::from_vec(s, out)?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Mean per-pixel cross entropy of `logits` (N, K, H, W) against
    /// `labels` (N*H*W class indices). Pixels labelled `ignore` are skipped.
    pub fn cross_entropy_spatial(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        ignore: Option<u8>,
    ) -> Result<NodeId> {
        let s = self.shape(logits);
        if labels.len() != s.n * s.plane() {
            return Err(Error::shape(
                "cross_entropy_spatial",
                s,
                Shape4::new(s.n, 1, s.h, s.w),
            ));
        }
        let plane = s.plane();
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; s.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for n in 0..s.n {
            for p in 0..plane {
                let label = labels[n * plane + p];
                if Some(label) == ignore {
                    continue;
                }
                if label as usize >= s.c {
                    return Err(Error::invalid(format!(
                        "label {label} out of range for {} classes",
                        s.c
                    )));
                }
                let idx = |c: usize| (n * s.c + c) * plane + p;
                let max = (0..s.c)
                    .map(|c| lv[idx(c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..s.c).map(|c| (lv[idx(c)] - max).exp()).sum();
                for c in 0..s.c {
                    probs[idx(c)] = (lv[idx(c)] - max).exp() / z;
                }
                total += max + z.ln() - lv[idx(label as usize)];
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            ignore,
            count,
        };
        Ok(self.push(Tensor4::scalar(loss), op))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor4::scalar(v), Op::Sum { x })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor4::from_vec(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |p: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[p.0].requires_grad {
                    let buf = grads[p.0]
                        .get_or_insert_with(|| vec![0.0; nodes[p.0].value.shape().numel()]);
                    f(buf);
                }
            };
            let shape = node.value.shape();
            match &node.op {
                Op::Input | Op::Param(_) | Op::Constant => {}
                Op::Conv2d { x, w, bias, geom } => {
                    let xs = nodes[x.0].value.shape();
                    let dims = ConvDims {
                        n: xs.n,
                        c_in: xs.c,
                        h: xs.h,
                        w: xs.w,
                        c_out: shape.c,
                        h_out: shape.h,
                        w_out: shape.w,
                    };
                    let wv = nodes[w.0].value.data();
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |gx| {
                        kernels::conv2d_backward_input(&g, wv, &dims, geom, gx)
                    });
                    acc(*w, &mut |gw| {
                        kernels::conv2d_backward_weight(&g, xv, &dims, geom, gw)
                    });
                    if let Some(b) = bias {
                        acc(*b, &mut |gb| {
                            for (k, chunk) in g.chunks(shape.plane()).enumerate() {
                                gb[k % shape.c] += chunk.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::MaxPool3 { x, argmax } => acc(*x, &mut |gx| {
                    for (o, &a) in argmax.iter().enumerate() {
                        gx[a as usize] += g[o];
                    }
                }),
                Op::AvgPool3 { x } => acc(*x, &mut |gx| {
                    kernels::avg_pool3_backward(&g, shape.n * shape.c, shape.h, shape.w, gx)
                }),
                Op::Add(xs) => {
                    for &x in xs {
                        acc(x, &mut |gx| add_into(gx, &g));
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(x, w, idx) in terms {
                        let wv = nodes[w.0].value.data()[idx];
                        acc(x, &mut |gx| {
                            for (a, b) in gx.iter_mut().zip(&g) {
                                *a += wv * b;
                            }
                        });
                        let xv = nodes[x.0].value.data();
                        acc(w, &mut |gw| {
                            gw[idx] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                        });
                    }
                }
                Op::Concat(xs) => {
                    let plane = shape.plane();
                    let mut c0 = 0;
                    for &x in xs {
                        let c = nodes[x.0].value.shape().c;
                        acc(x, &mut |gx| {
                            for n in 0..shape.n {
                                let src = &g[(n * shape.c + c0) * plane..][..c * plane];
                                add_into(&mut gx[n * c * plane..][..c * plane], src);
                            }
                        });
                        c0 += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = nodes[x.0].value.shape();
                    let plane = shape.plane();
                    acc(*x, &mut |gx| {
                        for n in 0..shape.n {
                            let dst = &mut gx[(n * xs.c + start) * plane..][..shape.c * plane];
                            add_into(dst, &g[n * shape.c * plane..][..shape.c * plane]);
                        }
                    });
                }
                Op::Resize { x } => {
                    let xs = nodes[x.0].value.shape();
                    acc(*x, &mut |gx| {
                        kernels::bilinear_backward(
                            &g,
                            xs.n * xs.c,
                            (xs.h, xs.w),
                            (shape.h, shape.w),
                            gx,
                        )
                    });
                }
                Op::GlobalAvgPool { x } => {
                    let plane = nodes[x.0].value.shape().plane();
                    acc(*x, &mut |gx| {
                        for (k, chunk) in gx.chunks_mut(plane).enumerate() {
                            let v = g[k] / plane as f64;
                            chunk.iter_mut().for_each(|a| *a += v);
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let plane = shape.plane();
                    let m = (shape.n * plane) as f64;
                    let gv = gamma.map(|p| nodes[p.0].value.data());
                    if let Some(p) = gamma {
                        acc(*p, &mut |gg| {
                            for (k, chunk) in g.chunks(plane).enumerate() {
                                let xh = &xhat[k * plane..][..plane];
                                gg[k % shape.c] +=
                                    chunk.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                            }
                        });
                    }
                    if let Some(p) = beta {
                        acc(*p, &mut |gb| {
                            for (k, chunk) in g.chunks(plane).enumerate() {
                                gb[k % shape.c] += chunk.iter().sum::<f64>();
                            }
                        });
                    }
                    acc(*x, &mut |gx| {
                        for c in 0..shape.c {
                            let scale = gv.map_or(1.0, |gv| gv[c]);
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for n in 0..shape.n {
                                let off = (n * shape.c + c) * plane;
                                for i in off..off + plane {
                                    let d = g[i] * scale;
                                    s1 += d;
                                    s2 += d * xhat[i];
                                }
                            }
                            let k = inv_std[c] / m;
                            for n in 0..shape.n {
                                let off = (n * shape.c + c) * plane;
                                for i in off..off + plane {
                                    gx[i] += k * (m * g[i] * scale - s1 - xhat[i] * s2);
                                }
                            }
                        }
                    });
                }
                Op::Relu { x } => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |gx| {
                        for ((a, b), v) in gx.iter_mut().zip(&g).zip(xv) {
                            if *v > 0.0 {
                                *a += b;
                            }
                        }
                    });
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let plane = shape.plane();
                    acc(*x, &mut |gx| {
                        for n in 0..shape.n {
                            for p in 0..plane {
                                let idx = |c: usize| (n * shape.c + c) * plane + p;
                                let dot: f64 = (0..shape.c).map(|c| g[idx(c)] * y[idx(c)]).sum();
                                for c in 0..shape.c {
                                    gx[idx(c)] += y[idx(c)] * (g[idx(c)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    ignore,
                    count,
                } => {
                    if *count > 0 {
                        let ls = nodes[logits.0].value.shape();
                        let plane = ls.plane();
                        let k = g[0] / *count as f64;
                        acc(*logits, &mut |gx| {
                            for n in 0..ls.n {
                                for p in 0..plane {
                                    let label = labels[n * plane + p];
                                    if Some(label) == *ignore {
                                        continue;
                                    }
                                    for c in 0..ls.c {
                                        let i = (n * ls.c + c) * plane + p;
                                        let target = if c == label as usize { 1.0 } else { 0.0 };
                                        gx[i] += k * (probs[i] - target);
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Sum { x } => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |ga| {
                        for ((d, gg), v) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gg * v;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((d, gg), v) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gg * v;
                        }
                    });
                }
                Op::Scale { x, c } => acc(*x, &mut |gx| {
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += c * b;
                    }
                }),
            }
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds each parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &node) in &self.params {
            if let Some(g) = self.grad(node) {
                add_into(store.grad_mut(pid), g);
            }
        }
    }

    /// Hash of every piecewise-selection decision in the graph (ReLU signs,
    /// max-pool winners). Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool3 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sum_and_product_gradients() {
        let mut r = rng();
        let s = Shape4::new(2, 3, 2, 2);
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor4::randn(s, 1.0, &mut r));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::new();
        let xt = Tensor4::randn(s, 1.0, &mut r);
        let yt = Tensor4::randn(s, 1.0, &mut r);
        let x = g.input_with_grad(xt);
        let y = g.input(yt.clone());
        let p = g.mul(x, y).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), yt.data());
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor4::zeros(Shape4::new(1, 2, 1, 1)));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_and_identity() {
        let mut r = rng();
        let s = Shape4::new(1, 2, 3, 3);
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor4::randn(s, 1.0, &mut r));
        let z = g.zero_op(x);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let i = g.identity(x);
        assert_eq!(g.value(i), g.value(x));
        let both = g.add(&[z, i]).unwrap();
        let l = g.sum(both);
        g.backward(l).unwrap();
        assert!(g.grad(z).is_none());
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_then_slice_is_exact() {
        let mut r = rng();
        let mut g = Graph::new();
        let a = g.input(Tensor4::randn(Shape4::new(2, 3, 4, 4), 1.0, &mut r));
        let b = g.input(Tensor4::randn(Shape4::new(2, 5, 4, 4), 1.0, &mut r));
        let c = g.concat_channels(&[a, b]).unwrap();
        let a2 = g.slice_channels(c, 0, 3).unwrap();
        let b2 = g.slice_channels(c, 3, 5).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let bad = g.input(Tensor4::zeros(Shape4::new(2, 1, 3, 4)));
        assert!(matches!(
            g.concat_channels(&[a, bad]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor4::full(Shape4::new(1, 2, 3, 5), -1.75));
        let u = g.bilinear_upsample_x2(x).unwrap();
        assert_eq!(g.shape(u), Shape4::new(1, 2, 6, 10));
        assert!(g.value(u).data().iter().all(|&v| v == -1.75));
    }

    #[test]
    fn batch_norm_normalizes() {
        let mut r = rng();
        let s = Shape4::new(2, 3, 2, 2);
        let mut t = Tensor4::randn(s, 3.0, &mut r);
        t.data_mut().iter_mut().for_each(|v| *v += 5.0);
        let mut g = Graph::new();
        let x = g.input(t);
        let y = g.batch_norm(x, None, None).unwrap();
        let yv = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..2).flat_map(move |h| (0..2).map(move |w| (n, h, w))))
                .map(|(n, h, w)| yv.at(n, c, h, w))
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn masked_softmax_zeroes_and_normalizes() {
        let mut g = Graph::new();
        let x = g.input(Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.3, -1.0, 2.0]).unwrap());
        let y = g
            .softmax_over_channel(x, Some(&[false, true, true]))
            .unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
        let z = g
            .softmax_over_channel(x, Some(&[false, false, false]))
            .unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let x = g.input(Tensor4::zeros(Shape4::new(1, 3, 4, 4)));
        let w = g.input(Tensor4::zeros(Shape4::new(2, 2, 3, 3)));
        let err = g.conv2d(x, w, None, 1, 1, 1).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
        assert!(err.to_string().contains("(1, 3, 4, 4)"));
        let y = g.input(Tensor4::zeros(Shape4::new(1, 3, 2, 2)));
        assert!(g.add(&[x, y]).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn cross_entropy_ignores_pixels() {
        let mut g = Graph::new();
        let logits = g.input_with_grad(Tensor4::zeros(Shape4::new(1, 4, 1, 2)));
        let l = g
            .cross_entropy_spatial(logits, &[1, 255], Some(255))
            .unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        let gr = g.grad(logits).unwrap();
        // second pixel ignored
        assert!(gr.iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }
}
