//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! Each forward pass builds a fresh tape; `backward` walks it in reverse and
//! accumulates gradients per node. Single-threaded and allocation-order
//! deterministic, so repeated runs are bit-identical.

use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        /// im2col buffer saved from the forward pass.
        col: Vec<T>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Tanh {
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
    /// Elementwise product; `b` may have a single channel that broadcasts
    /// across `a`'s channels.
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    AddConst {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Resize {
        x: NodeId,
        oh: usize,
        ow: usize,
    },
    GridSample {
        x: NodeId,
        flow: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        eps: f64,
    },
    ChannelSoftmax {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Tensor<T>,
    },
    MeanAll {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    /// Multiply one channel of `x` by a `[1,H,W]` mask node.
    MulChannel {
        x: NodeId,
        m: NodeId,
        channel: usize,
    },
    /// Total variation: sum of absolute forward differences on both axes.
    TvSum {
        x: NodeId,
    },
    /// Mean over pixels of `-sum_k target[k] * ln(p[k] + eps)`.
    CeMean {
        p: NodeId,
        target: Tensor<T>,
        eps: f64,
    },
    /// Weight divided by its leading singular value estimate `sigma = u^T W v`.
    SpectralWeight {
        w: NodeId,
        u: Tensor<T>,
        v: Tensor<T>,
        sigma: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients per tape node, populated by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input: gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: `backward` will produce a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let (cin, h, wd) = self.value(x).chw();
        let wdims = self.value(w).dims().to_vec();
        assert_eq!(wdims.len(), 4, "conv weight must be [O,I,Kh,Kw]");
        assert_eq!(wdims[1], cin, "conv in-channel mismatch");
        assert_eq!(wdims[2], wdims[3], "only square kernels supported");
        let (cout, k) = (wdims[0], wdims[2]);
        let (oh, ow) = kernels::conv_out_size(h, wd, k, stride, pad);
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        let col = kernels::conv2d_forward(
            self.value(x).data(),
            cin,
            h,
            wd,
            self.value(w).data(),
            b.map(|bb| self.value(bb).data()),
            cout,
            k,
            stride,
            pad,
            out.data_mut(),
        );
        let needs = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        let col = if needs { col } else { Vec::new() };
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
            needs,
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let v = self.value(x).map(|v| if v > T::ZERO { v } else { v * s });
        let needs = self.ng(x);
        self.push(v, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let needs = self.ng(x);
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dims(), self.value(b).dims());
        let vb = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(vb) {
            *x -= y;
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let da = self.value(a).dims().to_vec();
        let db = self.value(b).dims().to_vec();
        let broadcast = da.len() == 3 && db.len() == 3 && db[0] == 1 && da[0] != 1;
        if !broadcast {
            assert_eq!(da, db, "mul shape mismatch");
        } else {
            assert_eq!(&da[1..], &db[1..], "mul broadcast spatial mismatch");
        }
        let bv = self.value(b).data();
        let av = self.value(a).data();
        let plane = if broadcast { db[1] * db[2] } else { 0 };
        let data: Vec<T> = if broadcast {
            av.iter()
                .enumerate()
                .map(|(i, &x)| x * bv[i % plane])
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
        };
        let v = Tensor::from_vec(&da, data);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = T::from_f64(k);
        let v = self.value(x).map(|v| v * kk);
        let needs = self.ng(x);
        self.push(v, Op::Scale { x, k }, needs)
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let kk = T::from_f64(k);
        let v = self.value(x).map(|v| v + kk);
        let needs = self.ng(x);
        self.push(v, Op::AddConst { x }, needs)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
        }
        let mut data = Vec::with_capacity(c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&[c, h, w], data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        if (h, w) == (oh, ow) {
            // still emit a node so callers can treat it uniformly
        }
        let mut out = Tensor::zeros(&[c, oh, ow]);
        kernels::bilinear_resize_forward(self.value(x).data(), c, h, w, oh, ow, out.data_mut());
        let needs = self.ng(x);
        self.push(out, Op::Resize { x, oh, ow }, needs)
    }

    pub fn grid_sample(&mut self, x: NodeId, flow: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let (fc, fh, fw) = self.value(flow).chw();
        assert_eq!(fc, 2, "flow must have 2 channels");
        assert_eq!((fh, fw), (h, w), "flow size must match input");
        let mut out = Tensor::zeros(&[c, h, w]);
        kernels::grid_sample_forward(
            self.value(x).data(),
            c,
            h,
            w,
            self.value(flow).data(),
            out.data_mut(),
        );
        let needs = self.ng(x) || self.ng(flow);
        self.push(out, Op::GridSample { x, flow }, needs)
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let src = &self.value(x).data()[ch * n..(ch + 1) * n];
            let mean = src.iter().copied().sum::<T>() / T::from_f64(n as f64);
            let var = src
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / T::from_f64(n as f64);
            let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
            let dst = &mut out.data_mut()[ch * n..(ch + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::InstanceNorm { x, eps }, needs)
    }

    pub fn channel_softmax(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let n = h * w;
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[c, h, w]);
        let ov = out.data_mut();
        for p in 0..n {
            let mut mx = xv[p];
            for ch in 1..c {
                mx = mx.maxv(xv[ch * n + p]);
            }
            let mut denom = T::ZERO;
            for ch in 0..c {
                let e = (xv[ch * n + p] - mx).exp();
                ov[ch * n + p] = e;
                denom += e;
            }
            for ch in 0..c {
                ov[ch * n + p] /= denom;
            }
        }
        let needs = self.ng(x);
        self.push(out, Op::ChannelSoftmax { x }, needs)
    }

    /// Dropout with a precomputed keep mask holding `0` or `1/(1-p)`.
    pub fn dropout(&mut self, x: NodeId, mask: Tensor<T>) -> NodeId {
        assert_eq!(self.value(x).dims(), mask.dims());
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        let v = Tensor::from_vec(self.value(x).dims(), data);
        let needs = self.ng(x);
        self.push(v, Op::Dropout { x, mask }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.abs());
        let needs = self.ng(x);
        self.push(v, Op::Abs { x }, needs)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        let needs = self.ng(x);
        self.push(v, Op::Square { x }, needs)
    }

    pub fn mul_channel(&mut self, x: NodeId, m: NodeId, channel: usize) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let (mc, mh, mw) = self.value(m).chw();
        assert_eq!(mc, 1, "channel mask must be [1,H,W]");
        assert_eq!((mh, mw), (h, w), "channel mask spatial mismatch");
        assert!(channel < c);
        let mut v = self.value(x).clone();
        let n = h * w;
        {
            let mv = self.nodes[m.0].value.data();
            let dst = &mut v.data_mut()[channel * n..(channel + 1) * n];
            for (d, &mm) in dst.iter_mut().zip(mv) {
                *d *= mm;
            }
        }
        let needs = self.ng(x) || self.ng(m);
        self.push(v, Op::MulChannel { x, m, channel }, needs)
    }

    pub fn tv_sum(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let xv = self.value(x).data();
        let mut s = T::ZERO;
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w.saturating_sub(1) {
                    s += (xv[base + i * w + j + 1] - xv[base + i * w + j]).abs();
                }
            }
            for i in 0..h.saturating_sub(1) {
                for j in 0..w {
                    s += (xv[base + (i + 1) * w + j] - xv[base + i * w + j]).abs();
                }
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::TvSum { x }, needs)
    }

    pub fn ce_mean(&mut self, p: NodeId, target: Tensor<T>, eps: f64) -> NodeId {
        let (c, h, w) = self.value(p).chw();
        assert_eq!(target.dims(), &[c, h, w]);
        let e = T::from_f64(eps);
        let pv = self.value(p).data();
        let tv = target.data();
        let mut s = T::ZERO;
        for (pi, ti) in pv.iter().zip(tv) {
            if *ti != T::ZERO {
                s -= *ti * (*pi + e).ln();
            }
        }
        s /= T::from_f64((h * w) as f64);
        let needs = self.ng(p);
        self.push(Tensor::scalar(s), Op::CeMean { p, target, eps }, needs)
    }

    /// Spectrally normalized view of a weight leaf: `w / (u^T W v)`.
    pub fn spectral_weight(&mut self, w: NodeId, u: Tensor<T>, v: Tensor<T>) -> NodeId {
        let wd = self.value(w).dims().to_vec();
        let rows = wd[0];
        let cols: usize = wd[1..].iter().product();
        assert_eq!(u.numel(), rows);
        assert_eq!(v.numel(), cols);
        let wv = self.value(w).data();
        let mut sigma = T::ZERO;
        for r in 0..rows {
            let mut acc = T::ZERO;
            for cidx in 0..cols {
                acc += wv[r * cols + cidx] * v.data()[cidx];
            }
            sigma += u.data()[r] * acc;
        }
        let vvalue = {
            let s = sigma;
            self.value(w).map(|x| x / s)
        };
        let needs = self.ng(w);
        self.push(vvalue, Op::SpectralWeight { w, u, v, sigma }, needs)
    }

    fn accum(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    col,
                } => {
                    let (cin, h, wd) = self.value(*x).chw();
                    let wdims = self.value(*w).dims();
                    let (cout, k) = (wdims[0], wdims[2]);
                    let mut gx = if self.ng(*x) {
                        Some(Tensor::zeros(&[cin, h, wd]))
                    } else {
                        None
                    };
                    let mut gw = if self.ng(*w) {
                        Some(Tensor::zeros(wdims))
                    } else {
                        None
                    };
                    let mut gb = match b {
                        Some(bb) if self.ng(*bb) => Some(Tensor::zeros(&[cout])),
                        _ => None,
                    };
                    kernels::conv2d_backward(
                        col,
                        cin,
                        h,
                        wd,
                        self.value(*w).data(),
                        cout,
                        k,
                        *stride,
                        *pad,
                        g.data(),
                        gx.as_mut().map(|t| t.data_mut()),
                        gw.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                    if let Some(gx) = gx {
                        Self::accum(&mut grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        Self::accum(&mut grads, *w, gw);
                    }
                    if let (Some(bb), Some(gb)) = (b, gb) {
                        Self::accum(&mut grads, *bb, gb);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let s = T::from_f64(*slope);
                    let xv = self.value(*x).data();
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > T::ZERO { gi } else { gi * s })
                        .collect();
                    Self::accum(&mut grads, *x, Tensor::from_vec(g.dims(), data));
                }
                Op::Tanh { x } => {
                    let yv = node.value.data();
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(yv)
                        .map(|(&gi, &yi)| gi * (T::ONE - yi * yi))
                        .collect();
                    Self::accum(&mut grads, *x, Tensor::from_vec(g.dims(), data));
                }
                Op::Add { a, b } => {
                    if self.ng(*a) {
                        Self::accum(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        Self::accum(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.ng(*a) {
                        Self::accum(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        let mut gn = g;
                        for v in gn.data_mut() {
                            *v = -*v;
                        }
                        Self::accum(&mut grads, *b, gn);
                    }
                }
                Op::Mul { a, b } => {
                    let da = self.value(*a).dims().to_vec();
                    let db = self.value(*b).dims().to_vec();
                    let broadcast = da.len() == 3 && db[0] == 1 && da[0] != 1;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.ng(*a) {
                        let data: Vec<T> = if broadcast {
                            let plane = db[1] * db[2];
                            g.data()
                                .iter()
                                .enumerate()
                                .map(|(i, &gi)| gi * bv[i % plane])
                                .collect()
                        } else {
                            g.data().iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()
                        };
                        Self::accum(&mut grads, *a, Tensor::from_vec(&da, data));
                    }
                    if self.ng(*b) {
                        if broadcast {
                            let plane = db[1] * db[2];
                            let mut data = vec![T::ZERO; plane];
                            for (i, (&gi, &ai)) in g.data().iter().zip(av).enumerate() {
                                data[i % plane] += gi * ai;
                            }
                            Self::accum(&mut grads, *b, Tensor::from_vec(&db, data));
                        } else {
                            let data: Vec<T> =
                                g.data().iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                            Self::accum(&mut grads, *b, Tensor::from_vec(&db, data));
                        }
                    }
                }
                Op::Scale { x, k } => {
                    let kk = T::from_f64(*k);
                    Self::accum(&mut grads, *x, g.map(|v| v * kk));
                }
                Op::AddConst { x } => {
                    Self::accum(&mut grads, *x, g);
                }
                Op::Concat { parts } => {
                    let (_, h, w) = node.value.chw();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let (pc, _, _) = self.value(p).chw();
                        if self.ng(p) {
                            let slice =
                                g.data()[offset * plane..(offset + pc) * plane].to_vec();
                            Self::accum(&mut grads, p, Tensor::from_vec(&[pc, h, w], slice));
                        }
                        offset += pc;
                    }
                }
                Op::Resize { x, oh, ow } => {
                    let (c, h, w) = self.value(*x).chw();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    kernels::bilinear_resize_backward(
                        g.data(),
                        c,
                        h,
                        w,
                        *oh,
                        *ow,
                        gx.data_mut(),
                    );
                    Self::accum(&mut grads, *x, gx);
                }
                Op::GridSample { x, flow } => {
                    let (c, h, w) = self.value(*x).chw();
                    let mut gx = if self.ng(*x) {
                        Some(Tensor::zeros(&[c, h, w]))
                    } else {
                        None
                    };
                    let mut gf = if self.ng(*flow) {
                        Some(Tensor::zeros(&[2, h, w]))
                    } else {
                        None
                    };
                    kernels::grid_sample_backward(
                        self.value(*x).data(),
                        c,
                        h,
                        w,
                        self.value(*flow).data(),
                        g.data(),
                        gx.as_mut().map(|t| t.data_mut()),
                        gf.as_mut().map(|t| t.data_mut()),
                    );
                    if let Some(gx) = gx {
                        Self::accum(&mut grads, *x, gx);
                    }
                    if let Some(gf) = gf {
                        Self::accum(&mut grads, *flow, gf);
                    }
                }
                Op::InstanceNorm { x, eps } => {
                    let (c, h, w) = self.value(*x).chw();
                    let n = h * w;
                    let nf = T::from_f64(n as f64);
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let xs = &xv[ch * n..(ch + 1) * n];
                        let ys = &yv[ch * n..(ch + 1) * n];
                        let gs = &g.data()[ch * n..(ch + 1) * n];
                        let mean = xs.iter().copied().sum::<T>() / nf;
                        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                        let inv = T::ONE / (var + T::from_f64(*eps)).sqrt();
                        let gmean = gs.iter().copied().sum::<T>() / nf;
                        let gymean = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        let dst = &mut gx.data_mut()[ch * n..(ch + 1) * n];
                        for ((d, &gi), &yi) in dst.iter_mut().zip(gs).zip(ys) {
                            *d = (gi - gmean - yi * gymean) * inv;
                        }
                    }
                    Self::accum(&mut grads, *x, gx);
                }
                Op::ChannelSoftmax { x } => {
                    let (c, h, w) = node.value.chw();
                    let n = h * w;
                    let pv = node.value.data();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for p in 0..n {
                        let mut dot = T::ZERO;
                        for ch in 0..c {
                            dot += g.data()[ch * n + p] * pv[ch * n + p];
                        }
                        for ch in 0..c {
                            gx.data_mut()[ch * n + p] =
                                pv[ch * n + p] * (g.data()[ch * n + p] - dot);
                        }
                    }
                    Self::accum(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&gi, &m)| gi * m)
                        .collect();
                    Self::accum(&mut grads, *x, Tensor::from_vec(g.dims(), data));
                }
                Op::MeanAll { x } => {
                    let n = self.value(*x).numel();
                    let gv = g.item() / T::from_f64(n as f64);
                    Self::accum(&mut grads, *x, Tensor::full(self.value(*x).dims(), gv));
                }
                Op::SumAll { x } => {
                    let gv = g.item();
                    Self::accum(&mut grads, *x, Tensor::full(self.value(*x).dims(), gv));
                }
                Op::Abs { x } => {
                    let xv = self.value(*x).data();
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| {
                            if xi > T::ZERO {
                                gi
                            } else if xi < T::ZERO {
                                -gi
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    Self::accum(&mut grads, *x, Tensor::from_vec(g.dims(), data));
                }
                Op::Square { x } => {
                    let xv = self.value(*x).data();
                    let two = T::from_f64(2.0);
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| gi * two * xi)
                        .collect();
                    Self::accum(&mut grads, *x, Tensor::from_vec(g.dims(), data));
                }
                Op::MulChannel { x, m, channel } => {
                    let (_, h, w) = self.value(*x).chw();
                    let n = h * w;
                    let mv = self.value(*m).data();
                    let xv = self.value(*x).data();
                    if self.ng(*x) {
                        let mut gx = g.clone();
                        let dst = &mut gx.data_mut()[channel * n..(channel + 1) * n];
                        for (d, &mm) in dst.iter_mut().zip(mv) {
                            *d *= mm;
                        }
                        Self::accum(&mut grads, *x, gx);
                    }
                    if self.ng(*m) {
                        let gslice = &g.data()[channel * n..(channel + 1) * n];
                        let xslice = &xv[channel * n..(channel + 1) * n];
                        let data: Vec<T> = gslice
                            .iter()
                            .zip(xslice)
                            .map(|(&gi, &xi)| gi * xi)
                            .collect();
                        Self::accum(&mut grads, *m, Tensor::from_vec(&[1, h, w], data));
                    }
                }
                Op::TvSum { x } => {
                    let (c, h, w) = self.value(*x).chw();
                    let xv = self.value(*x).data();
                    let gv = g.item();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let gd = gx.data_mut();
                    let sign = |d: T| {
                        if d > T::ZERO {
                            T::ONE
                        } else if d < T::ZERO {
                            -T::ONE
                        } else {
                            T::ZERO
                        }
                    };
                    for ch in 0..c {
                        let base = ch * h * w;
                        for i in 0..h {
                            for j in 0..w.saturating_sub(1) {
                                let s = sign(xv[base + i * w + j + 1] - xv[base + i * w + j]);
                                gd[base + i * w + j + 1] += gv * s;
                                gd[base + i * w + j] -= gv * s;
                            }
                        }
                        for i in 0..h.saturating_sub(1) {
                            for j in 0..w {
                                let s = sign(xv[base + (i + 1) * w + j] - xv[base + i * w + j]);
                                gd[base + (i + 1) * w + j] += gv * s;
                                gd[base + i * w + j] -= gv * s;
                            }
                        }
                    }
                    Self::accum(&mut grads, *x, gx);
                }
                Op::CeMean { p, target, eps } => {
                    let (c, h, w) = self.value(*p).chw();
                    let n = h * w;
                    let e = T::from_f64(*eps);
                    let gv = g.item() / T::from_f64(n as f64);
                    let pv = self.value(*p).data();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ((d, &pi), &ti) in gx.data_mut().iter_mut().zip(pv).zip(target.data()) {
                        if ti != T::ZERO {
                            *d = -gv * ti / (pi + e);
                        }
                    }
                    Self::accum(&mut grads, *p, gx);
                }
                Op::SpectralWeight { w, u, v, sigma } => {
                    // d(w/sigma)/dw = I/sigma - (w u v^T)/sigma^2 contracted with g
                    let wdims = self.value(*w).dims().to_vec();
                    let rows = wdims[0];
                    let cols: usize = wdims[1..].iter().product();
                    let wv = self.value(*w).data();
                    let s = *sigma;
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(wv)
                        .map(|(&gi, &wi)| gi * wi)
                        .sum::<T>();
                    let coef = dot / (s * s);
                    let mut gw = Tensor::zeros(&wdims);
                    for r in 0..rows {
                        let ur = u.data()[r];
                        for cidx in 0..cols {
                            gw.data_mut()[r * cols + cidx] = g.data()[r * cols + cidx] / s
                                - coef * ur * v.data()[cidx];
                        }
                    }
                    Self::accum(&mut grads, *w, gw);
                }
            }
        }
        Gradients { grads }
    }
}
