//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records its operations on a [`Tape`]; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node,
//! including parameter leaves. Tapes are cheap to create and are rebuilt per
//! sample, which keeps recurrent graphs of arbitrary sequence length simple.
//!
//! Convolutions run as im2col + GEMM; the brute-force oracles in the test
//! suites are independent of that path.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::param::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_at, gemm_bt, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    /// Stride-1 convolution, square odd kernel, zero padding `(k-1)/2`.
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// Deformable convolution: one group, stride 1, zero-padded bilinear taps.
    DeformConv {
        x: NodeId,
        offsets: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    PixelShuffle {
        x: NodeId,
        s: usize,
    },
    /// Global average pool `[C,H,W] -> [C]`.
    AvgPoolAll {
        x: NodeId,
    },
    /// `y = W x + b` on vectors.
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// Per-channel gate broadcast over space: `y[c,h,w] = g[c] * x[c,h,w]`.
    ChannelScale {
        gate: NodeId,
        x: NodeId,
    },
    /// Mean of `sqrt(x^2 + eps^2)` over all elements -> `[1]`.
    CharbonnierMean {
        x: NodeId,
        eps: f64,
    },
    SumScalars {
        xs: Vec<NodeId>,
    },
    /// Full contraction `sum(a * b)` -> `[1]`.
    Dot {
        a: NodeId,
        b: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Gradients for every node of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. one node, if any path reached it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a constant input (data, targets, ...).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Record a parameter leaf. Repeated requests for the same parameter
    /// return the same node, so shared weights accumulate gradients from
    /// every use site.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, _) = conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Conv2d { x, w, b }))
    }

    pub fn deform_conv(
        &mut self,
        x: NodeId,
        offsets: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let value = deform_conv_forward(
            self.value(x),
            self.value(offsets),
            self.value(w),
            self.value(b),
        )?;
        Ok(self.push(value, Op::DeformConv { x, offsets, w, b }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let value = self.value(x).map(|v| one / (one + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(format!(
                "sub: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        value.axpy(-T::one(), vb);
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Concatenate `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels: no inputs"));
        }
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut c_total = 0;
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: spatial mismatch {}x{} vs {}x{}",
                    ph, pw, h, w
                )));
            }
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![c_total, h, w], data)?;
        Ok(self.push(
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, s: usize) -> Result<NodeId> {
        let value = pixel_shuffle_forward(self.value(x), s)?;
        Ok(self.push(value, Op::PixelShuffle { x, s }))
    }

    pub fn avg_pool_all(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mut acc = T::zero();
            for &v in self.value(x).plane(ci) {
                acc += v;
            }
            out.data_mut()[ci] = acc * inv;
        }
        Ok(self.push(out, Op::AvgPoolAll { x }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vw.shape().len() != 2 || vx.shape().len() != 1 || vb.shape().len() != 1 {
            return Err(Error::shape("linear: expected w[O,I], x[I], b[O]"));
        }
        let (o, i) = (vw.shape()[0], vw.shape()[1]);
        if vx.len() != i || vb.len() != o {
            return Err(Error::shape(format!(
                "linear: w{:?} incompatible with x{:?}/b{:?}",
                vw.shape(),
                vx.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[o]);
        for oi in 0..o {
            let row = &vw.data()[oi * i..(oi + 1) * i];
            let mut acc = vb.data()[oi];
            for (wv, xv) in row.iter().zip(vx.data()) {
                acc += *wv * *xv;
            }
            out.data_mut()[oi] = acc;
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn channel_scale(&mut self, gate: NodeId, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(gate).shape() != [c] {
            return Err(Error::shape(format!(
                "channel_scale: gate {:?} vs {} channels",
                self.value(gate).shape(),
                c
            )));
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let g = self.value(gate).data()[ci];
            let src = self.value(x).plane(ci);
            let dst = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = g * *s;
            }
        }
        Ok(self.push(out, Op::ChannelScale { gate, x }))
    }

    /// Mean over all elements of the Charbonnier penalty `sqrt(v^2 + eps^2)`.
    pub fn charbonnier_mean(&mut self, x: NodeId, eps: f64) -> NodeId {
        let e2 = T::from_f64(eps * eps);
        let n = T::from_f64(self.value(x).len() as f64);
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += (v * v + e2).sqrt();
        }
        let value = Tensor::scalar(acc / n);
        self.push(value, Op::CharbonnierMean { x, eps })
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = T::zero();
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::shape("sum_scalars: non-scalar input"));
            }
            acc += self.value(x).item();
        }
        Ok(self.push(Tensor::scalar(acc), Op::SumScalars { xs: xs.to_vec() }))
    }

    /// Full contraction to a scalar; used to project tensors in checks.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut acc = T::zero();
        for (x, y) in va.data().iter().zip(vb.data()) {
            acc += *x * *y;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Dot { a, b }))
    }

    /// Reverse pass from a scalar output. Returns per-node gradients.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward: output must be a scalar [1]"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every parameter the tape touched, indexed by parameter id.
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = grads.node(node) {
                out[pid.index()] = Some(g.clone());
            }
        }
        out
    }

    fn backward_node(
        &self,
        idx: usize,
        gy: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let mut gw = Tensor::zeros(self.value(*w).shape());
                let mut gb = Tensor::zeros(self.value(*b).shape());
                conv2d_backward(self.value(*x), self.value(*w), gy, &mut gx, &mut gw, &mut gb)?;
                grad_buf(grads, *x, gx.shape()).add_assign(&gx);
                grad_buf(grads, *w, gw.shape()).add_assign(&gw);
                grad_buf(grads, *b, gb.shape()).add_assign(&gb);
            }
            Op::DeformConv { x, offsets, w, b } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let mut goff = Tensor::zeros(self.value(*offsets).shape());
                let mut gw = Tensor::zeros(self.value(*w).shape());
                let mut gb = Tensor::zeros(self.value(*b).shape());
                deform_conv_backward(
                    self.value(*x),
                    self.value(*offsets),
                    self.value(*w),
                    gy,
                    &mut gx,
                    &mut goff,
                    &mut gw,
                    &mut gb,
                )?;
                grad_buf(grads, *x, gx.shape()).add_assign(&gx);
                grad_buf(grads, *offsets, goff.shape()).add_assign(&goff);
                grad_buf(grads, *w, gw.shape()).add_assign(&gw);
                grad_buf(grads, *b, gb.shape()).add_assign(&gb);
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64(*slope);
                let vx = self.value(*x);
                let gx = grad_buf(grads, *x, vx.shape());
                for ((g, &v), &gyv) in gx.data_mut().iter_mut().zip(vx.data()).zip(gy.data()) {
                    *g += if v > T::zero() { gyv } else { gyv * s };
                }
            }
            Op::Relu { x } => {
                let vx = self.value(*x);
                let gx = grad_buf(grads, *x, vx.shape());
                for ((g, &v), &gyv) in gx.data_mut().iter_mut().zip(vx.data()).zip(gy.data()) {
                    if v > T::zero() {
                        *g += gyv;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let vy = &node.value;
                let gx = grad_buf(grads, *x, vy.shape());
                for ((g, &y), &gyv) in gx.data_mut().iter_mut().zip(vy.data()).zip(gy.data()) {
                    *g += gyv * y * (T::one() - y);
                }
            }
            Op::Add { a, b } => {
                grad_buf(grads, *a, gy.shape()).add_assign(gy);
                grad_buf(grads, *b, gy.shape()).add_assign(gy);
            }
            Op::Sub { a, b } => {
                grad_buf(grads, *a, gy.shape()).add_assign(gy);
                grad_buf(grads, *b, gy.shape()).axpy(-T::one(), gy);
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let gp = grad_buf(grads, p, self.value(p).shape());
                    for (g, &s) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(&gy.data()[offset..offset + len])
                    {
                        *g += s;
                    }
                    offset += len;
                }
            }
            Op::PixelShuffle { x, s } => {
                let gx_contrib = pixel_unshuffle_forward(gy, *s)?;
                grad_buf(grads, *x, self.value(*x).shape()).add_assign(&gx_contrib);
            }
            Op::AvgPoolAll { x } => {
                let (c, h, w) = self.value(*x).chw()?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let gx = grad_buf(grads, *x, &[c, h, w]);
                for ci in 0..c {
                    let g = gy.data()[ci] * inv;
                    for v in &mut gx.data_mut()[ci * h * w..(ci + 1) * h * w] {
                        *v += g;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (o, i) = (vw.shape()[0], vw.shape()[1]);
                {
                    let gw = grad_buf(grads, *w, vw.shape());
                    for oi in 0..o {
                        let g = gy.data()[oi];
                        let row = &mut gw.data_mut()[oi * i..(oi + 1) * i];
                        for (r, &xv) in row.iter_mut().zip(vx.data()) {
                            *r += g * xv;
                        }
                    }
                }
                {
                    let gb = grad_buf(grads, *b, &[o]);
                    for (g, &gyv) in gb.data_mut().iter_mut().zip(gy.data()) {
                        *g += gyv;
                    }
                }
                {
                    let gx = grad_buf(grads, *x, &[i]);
                    for oi in 0..o {
                        let g = gy.data()[oi];
                        let row = &vw.data()[oi * i..(oi + 1) * i];
                        for (r, &wv) in gx.data_mut().iter_mut().zip(row) {
                            *r += g * wv;
                        }
                    }
                }
            }
            Op::ChannelScale { gate, x } => {
                let (c, h, w) = self.value(*x).chw()?;
                let hw = h * w;
                let (vg, vx) = (self.value(*gate), self.value(*x));
                {
                    let gg = grad_buf(grads, *gate, &[c]);
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for (gyv, xv) in gy.data()[ci * hw..(ci + 1) * hw]
                            .iter()
                            .zip(vx.plane(ci))
                        {
                            acc += *gyv * *xv;
                        }
                        gg.data_mut()[ci] += acc;
                    }
                }
                {
                    let gx = grad_buf(grads, *x, &[c, h, w]);
                    for ci in 0..c {
                        let g = vg.data()[ci];
                        for (d, gyv) in gx.data_mut()[ci * hw..(ci + 1) * hw]
                            .iter_mut()
                            .zip(&gy.data()[ci * hw..(ci + 1) * hw])
                        {
                            *d += g * *gyv;
                        }
                    }
                }
            }
            Op::CharbonnierMean { x, eps } => {
                let vx = self.value(*x);
                let e2 = T::from_f64(eps * eps);
                let scale = gy.item() * T::from_f64(1.0 / vx.len() as f64);
                let gx = grad_buf(grads, *x, vx.shape());
                for (g, &v) in gx.data_mut().iter_mut().zip(vx.data()) {
                    *g += scale * v / (v * v + e2).sqrt();
                }
            }
            Op::SumScalars { xs } => {
                for &x in xs {
                    grad_buf(grads, x, &[1]).data_mut()[0] += gy.item();
                }
            }
            Op::Dot { a, b } => {
                let g = gy.item();
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                grad_buf(grads, *a, va.shape()).axpy(g, &vb);
                grad_buf(grads, *b, vb.shape()).axpy(g, &va);
            }
        }
        Ok(())
    }
}

fn grad_buf<'g, T: Scalar>(
    grads: &'g mut Vec<Option<Tensor<T>>>,
    id: NodeId,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

// --- convolution kernels ----------------------------------------------------

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, width) = x.chw()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape(format!(
            "conv weight must be [C_out,C_in,K,K], got {:?}",
            ws
        )));
    }
    let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
    if k % 2 == 0 {
        return Err(Error::config(format!("conv kernel must be odd, got {}", k)));
    }
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv input channels {} vs weight {}",
            c_in, wc_in
        )));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv bias {:?} vs C_out {}",
            b.shape(),
            c_out
        )));
    }
    Ok((c_in, h, width, c_out, k))
}

/// im2col for zero-padded stride-1 convolution: `cols[(cin*k+ky)*k+kx, y*w+x]`.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, cols: &mut [T]) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = (k - 1) / 2;
    let hw = h * w;
    for cin in 0..c_in {
        let plane = x.plane(cin);
        for ky in 0..k {
            for kx in 0..k {
                let row = ((cin * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // sx = x + kx - pad stays in range for x in [lo, hi)
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    for xi in lo..hi {
                        dst[xi] = src_row[(xi as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], k: usize, gx: &mut Tensor<T>) {
    let (c_in, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let pad = (k - 1) / 2;
    let hw = h * w;
    for cin in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((cin * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    let base = cin * hw + sy as usize * w;
                    for xi in lo..hi {
                        gx.data_mut()[base + (xi as isize + shift) as usize] +=
                            cols[row + y * w + xi];
                    }
                }
            }
        }
    }
}

fn add_bias_rows<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * hw..(c + 1) * hw] {
            *v += b;
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, usize)> {
    let (c_in, h, width, c_out, k) = conv_dims(x, w, b)?;
    let hw = h * width;
    let kk = c_in * k * k;
    let mut out = Tensor::zeros(&[c_out, h, width]);
    if k == 1 {
        gemm(c_out, kk, hw, w.data(), x.data(), T::zero(), out.data_mut());
    } else {
        let mut cols = vec![T::zero(); kk * hw];
        im2col(x, k, &mut cols);
        gemm(c_out, kk, hw, w.data(), &cols, T::zero(), out.data_mut());
    }
    add_bias_rows(out.data_mut(), b.data(), hw);
    Ok((out, k))
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    gx: &mut Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<()> {
    let (c_in, h, width, c_out, k) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        w.shape()[0],
        w.shape()[2],
    );
    let hw = h * width;
    let kk = c_in * k * k;

    for (c, g) in gb.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &gy.data()[c * hw..(c + 1) * hw] {
            acc += v;
        }
        *g += acc;
    }

    if k == 1 {
        // gw += gy @ x^T ; gx += w^T @ gy
        gemm_bt(c_out, hw, kk, gy.data(), x.data(), T::one(), gw.data_mut());
        gemm_at(kk, c_out, hw, w.data(), gy.data(), T::one(), gx.data_mut());
    } else {
        let mut cols = vec![T::zero(); kk * hw];
        im2col(x, k, &mut cols);
        gemm_bt(c_out, hw, kk, gy.data(), &cols, T::one(), gw.data_mut());
        let mut gcols = vec![T::zero(); kk * hw];
        gemm_at(kk, c_out, hw, w.data(), gy.data(), T::zero(), &mut gcols);
        col2im(&gcols, k, gx);
    }
    Ok(())
}

// --- deformable convolution --------------------------------------------------

/// Shared bilinear tap geometry: corner indices and weights for a sampling
/// point, with out-of-range corners masked (zero padding).
#[derive(Clone, Copy)]
struct BilinearTap {
    y0: isize,
    x0: isize,
    wy1: f64,
    wx1: f64,
}

impl BilinearTap {
    #[inline]
    fn at(sy: f64, sx: f64) -> Self {
        let y0 = sy.floor();
        let x0 = sx.floor();
        BilinearTap {
            y0: y0 as isize,
            x0: x0 as isize,
            wy1: sy - y0,
            wx1: sx - x0,
        }
    }

    /// Corner weights `(w00, w01, w10, w11)` as scalars of type `T`.
    #[inline]
    fn weights<T: Scalar>(&self) -> (T, T, T, T) {
        let wy1 = T::from_f64(self.wy1);
        let wx1 = T::from_f64(self.wx1);
        let wy0 = T::one() - wy1;
        let wx0 = T::one() - wx1;
        (wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1)
    }

    #[inline]
    fn fetch<T: Scalar>(&self, plane: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
        let y = self.y0 + dy;
        let x = self.x0 + dx;
        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
            T::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    }

    #[inline]
    fn sample<T: Scalar>(&self, plane: &[T], h: usize, w: usize) -> T {
        let (w00, w01, w10, w11) = self.weights::<T>();
        w00 * self.fetch(plane, h, w, 0, 0)
            + w01 * self.fetch(plane, h, w, 0, 1)
            + w10 * self.fetch(plane, h, w, 1, 0)
            + w11 * self.fetch(plane, h, w, 1, 1)
    }
}

fn deform_dims<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, width, c_out, k) = conv_dims(x, w, b)?;
    let (oc, oh, ow) = offsets.chw()?;
    if oc != 2 * k * k {
        return Err(Error::shape(format!(
            "offset field must have 2*K^2={} channels, got {}",
            2 * k * k,
            oc
        )));
    }
    if (oh, ow) != (h, width) {
        return Err(Error::shape(format!(
            "offset field {}x{} vs input {}x{}",
            oh, ow, h, width
        )));
    }
    Ok((c_in, h, width, c_out, k))
}

/// Column matrix of bilinearly sampled taps; same layout as [`im2col`].
fn deform_cols<T: Scalar>(x: &Tensor<T>, offsets: &Tensor<T>, k: usize, cols: &mut [T]) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = (k - 1) as isize / 2;
    let hw = h * w;
    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            let off_y = offsets.plane(2 * tap);
            let off_x = offsets.plane(2 * tap + 1);
            for y in 0..h {
                for xp in 0..w {
                    let n = y * w + xp;
                    let sy = y as f64 + (ky as isize - pad) as f64 + off_y[n].as_f64();
                    let sx = xp as f64 + (kx as isize - pad) as f64 + off_x[n].as_f64();
                    let bt = BilinearTap::at(sy, sx);
                    for cin in 0..c_in {
                        cols[((cin * k + ky) * k + kx) * hw + n] =
                            bt.sample(x.plane(cin), h, w);
                    }
                }
            }
        }
    }
}

pub(crate) fn deform_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c_in, h, width, c_out, k) = deform_dims(x, offsets, w, b)?;
    let hw = h * width;
    let kk = c_in * k * k;
    let mut cols = vec![T::zero(); kk * hw];
    deform_cols(x, offsets, k, &mut cols);
    let mut out = Tensor::zeros(&[c_out, h, width]);
    gemm(c_out, kk, hw, w.data(), &cols, T::zero(), out.data_mut());
    add_bias_rows(out.data_mut(), b.data(), hw);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn deform_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    gx: &mut Tensor<T>,
    goff: &mut Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
) -> Result<()> {
    let (c_in, h, width, c_out, k) = deform_dims(x, offsets, w, gb)?;
    let hw = h * width;
    let kk = c_in * k * k;
    let pad = (k - 1) as isize / 2;

    for (c, g) in gb.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &gy.data()[c * hw..(c + 1) * hw] {
            acc += v;
        }
        *g += acc;
    }

    let mut cols = vec![T::zero(); kk * hw];
    deform_cols(x, offsets, k, &mut cols);
    gemm_bt(c_out, hw, kk, gy.data(), &cols, T::one(), gw.data_mut());

    let mut gcols = vec![T::zero(); kk * hw];
    gemm_at(kk, c_out, hw, w.data(), gy.data(), T::zero(), &mut gcols);

    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            let off_y = offsets.plane(2 * tap);
            let off_x = offsets.plane(2 * tap + 1);
            for y in 0..h {
                for xp in 0..width {
                    let n = y * width + xp;
                    let sy = y as f64 + (ky as isize - pad) as f64 + off_y[n].as_f64();
                    let sx = xp as f64 + (kx as isize - pad) as f64 + off_x[n].as_f64();
                    let bt = BilinearTap::at(sy, sx);
                    let (w00, w01, w10, w11) = bt.weights::<T>();
                    let wy1 = T::from_f64(bt.wy1);
                    let wx1 = T::from_f64(bt.wx1);
                    let wy0 = T::one() - wy1;
                    let wx0 = T::one() - wx1;

                    let mut gsy = T::zero();
                    let mut gsx = T::zero();
                    for cin in 0..c_in {
                        let g = gcols[((cin * k + ky) * k + kx) * hw + n];
                        if g == T::zero() {
                            continue;
                        }
                        let plane = x.plane(cin);
                        let v00 = bt.fetch(plane, h, width, 0, 0);
                        let v01 = bt.fetch(plane, h, width, 0, 1);
                        let v10 = bt.fetch(plane, h, width, 1, 0);
                        let v11 = bt.fetch(plane, h, width, 1, 1);
                        // d(sample)/d(sy) and /d(sx)
                        gsy += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                        gsx += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                        // scatter into the four corners of gx
                        let gplane = &mut gx.data_mut()[cin * hw..(cin + 1) * hw];
                        scatter(gplane, h, width, bt.y0, bt.x0, w00 * g);
                        scatter(gplane, h, width, bt.y0, bt.x0 + 1, w01 * g);
                        scatter(gplane, h, width, bt.y0 + 1, bt.x0, w10 * g);
                        scatter(gplane, h, width, bt.y0 + 1, bt.x0 + 1, w11 * g);
                    }
                    goff.data_mut()[(2 * tap) * hw + n] += gsy;
                    goff.data_mut()[(2 * tap + 1) * hw + n] += gsx;
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn scatter<T: Scalar>(plane: &mut [T], h: usize, w: usize, y: isize, x: isize, v: T) {
    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
        plane[y as usize * w + x as usize] += v;
    }
}

// --- pixel shuffle -----------------------------------------------------------

pub(crate) fn pixel_shuffle_forward<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if s == 0 || c % (s * s) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {} channels not divisible by {}^2",
            c, s
        )));
    }
    let c_out = c / (s * s);
    let mut out = Tensor::zeros(&[c_out, h * s, w * s]);
    let (oh, ow) = (h * s, w * s);
    for co in 0..c_out {
        for i in 0..s {
            for j in 0..s {
                let ci = co * s * s + i * s + j;
                let src = x.plane(ci);
                for y in 0..h {
                    for xp in 0..w {
                        out.data_mut()[co * oh * ow + (y * s + i) * ow + (xp * s + j)] =
                            src[y * w + xp];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle_forward`].
pub(crate) fn pixel_unshuffle_forward<T: Scalar>(y: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, oh, ow) = y.chw()?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: {}x{} not divisible by {}",
            oh, ow, s
        )));
    }
    let (h, w) = (oh / s, ow / s);
    let mut out = Tensor::zeros(&[c * s * s, h, w]);
    for co in 0..c {
        for i in 0..s {
            for j in 0..s {
                let ci = co * s * s + i * s + j;
                for yp in 0..h {
                    for xp in 0..w {
                        out.data_mut()[ci * h * w + yp * w + xp] =
                            y.data()[co * oh * ow + (yp * s + i) * ow + (xp * s + j)];
                    }
                }
            }
        }
    }
    Ok(out)
}
