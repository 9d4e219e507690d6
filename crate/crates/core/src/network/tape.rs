//! A small reverse-mode tape over NCHW tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers. Each op keeps just enough
//! state to produce its input gradients; convolutions re-unfold their input
//! during the backward pass instead of caching the column matrix.

use crate::tensor::{col2im, im2col, matmul, ConvGeometry, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    ResizeBilinear(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics measured by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// A trainable leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (o, ci, k, k2) = wv.dims4();
        assert_eq!(ci, c, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let rows = g.col_rows();
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * oh * ow]
        };
        let img_len = c * h * wd;
        let out_len = o * oh * ow;
        for i in 0..n {
            let img = &xv.data()[i * img_len..(i + 1) * img_len];
            let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
            if g.is_pointwise() {
                matmul(o, rows, oh * ow, wv.data(), false, img, false, dst, T::zero());
            } else {
                im2col(img, &g, &mut col);
                matmul(o, rows, oh * ow, wv.data(), false, &col, false, dst, T::zero());
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                let bias = bv[i % o];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// With `running == None` the batch statistics are used (and returned so
    /// the caller can update its running estimates); otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<BatchStats<T>>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv.plane(i, ch).iter().copied().sum();
                    }
                    let m = s / count;
                    let mut sq = T::zero();
                    for i in 0..n {
                        sq += xv.plane(i, ch).iter().map(|&v| (v - m) * (v - m)).sum();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                (mean, var, true)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let (m, s, g, b) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
            for v in chunk {
                *v = (*v - m) * s * g + b;
            }
        }
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
        );
        (var_out, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        self.push(out, Op::UpsampleNearest { x, factor })
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for (p, dst) in out.data_mut().chunks_mut(out_h * out_w).enumerate() {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
                let ly = T::of(ly);
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::of(lx);
                    let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                    dst[oy * out_w + ox] = top + (bot - top) * ly;
                }
            }
        }
        self.push(out, Op::ResizeBilinear(x))
    }

    /// Propagates `seeds` (gradients of a scalar objective w.r.t. some
    /// nodes) back to every input and parameter.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape");
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, gy, &mut grads);
        }
        let mut params = Vec::new();
        let mut inputs = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param(slot) => {
                    if let Some(g) = grads[idx].take() {
                        params.push((slot, g));
                    }
                }
                Op::Input => {
                    if let Some(g) = grads[idx].take() {
                        inputs.push((Var(idx), g));
                    }
                }
                _ => {}
            }
        }
        Gradients { params, inputs }
    }

    fn backward_node(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4();
                let (o, _, k, _) = wv.dims4();
                let g = ConvGeometry {
                    channels: c,
                    height: h,
                    width: wd,
                    kernel: k,
                    stride: *stride,
                    pad: *pad,
                };
                let (oh, ow) = (g.out_height(), g.out_width());
                let rows = g.col_rows();
                let img_len = c * h * wd;
                let out_len = o * oh * ow;
                let mut gw = Tensor::zeros(wv.shape());
                let mut gx = Tensor::zeros(xv.shape());
                let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * oh * ow }];
                let mut gcol = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * oh * ow }];
                for i in 0..n {
                    let img = &xv.data()[i * img_len..(i + 1) * img_len];
                    let gyi = &gy.data()[i * out_len..(i + 1) * out_len];
                    let gxi = &mut gx.data_mut()[i * img_len..(i + 1) * img_len];
                    if g.is_pointwise() {
                        matmul(o, oh * ow, rows, gyi, false, img, true, gw.data_mut(), T::one());
                        matmul(rows, o, oh * ow, wv.data(), true, gyi, false, gxi, T::zero());
                    } else {
                        im2col(img, &g, &mut col);
                        matmul(o, oh * ow, rows, gyi, false, &col, true, gw.data_mut(), T::one());
                        matmul(rows, o, oh * ow, wv.data(), true, gyi, false, &mut gcol, T::zero());
                        col2im(&gcol, &g, gxi);
                    }
                }
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[o]);
                    for (p, chunk) in gy.data().chunks(oh * ow).enumerate() {
                        gb.data_mut()[p % o] += chunk.iter().copied().sum();
                    }
                    accumulate(grads, *b, gb);
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let count = T::of((n * plane) as f64);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for i in 0..n {
                        let xs = xv.plane(i, ch);
                        let gs = gy.plane(i, ch);
                        for (&xval, &g) in xs.iter().zip(gs) {
                            let xhat = (xval - mean[ch]) * invstd[ch];
                            ggamma[ch] += g * xhat;
                            gbeta[ch] += g;
                        }
                    }
                }
                let mut gx = Tensor::zeros(xv.shape());
                for ch in 0..c {
                    let scale = gv[ch] * invstd[ch];
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        let xs = &xv.data()[off..off + plane];
                        let gs = &gy.data()[off..off + plane];
                        let dst = &mut gx.data_mut()[off..off + plane];
                        if *batch_stats {
                            // d/dx of gamma * xhat with batch mean and variance
                            let (sum_g, sum_gx) = (gbeta[ch] / count, ggamma[ch] / count);
                            for j in 0..plane {
                                let xhat = (xs[j] - mean[ch]) * invstd[ch];
                                dst[j] = scale * (gs[j] - sum_g - xhat * sum_gx);
                            }
                        } else {
                            for j in 0..plane {
                                dst[j] = scale * gs[j];
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, Tensor::from_vec(&[c], ggamma).expect("shape"));
                accumulate(grads, *beta, Tensor::from_vec(&[c], gbeta).expect("shape"));
            }
            Op::Relu(x) => {
                let mut g = gy;
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = gy;
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y * (T::one() - y);
                }
                accumulate(grads, *x, g);
            }
            Op::Exp(x) => {
                let mut g = gy;
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y;
                }
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                accumulate(grads, *b, gy.clone());
                accumulate(grads, *a, gy);
            }
            Op::UpsampleNearest { x, factor } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = Tensor::zeros(xv.shape());
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &gy.data()[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ResizeBilinear(x) => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let (_, _, out_h, out_w) = node.value.dims4();
                let ys = bilinear_taps(h, out_h);
                let xs = bilinear_taps(w, out_w);
                let mut gx = Tensor::zeros(xv.shape());
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &gy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        let ly = T::of(ly);
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let lx = T::of(lx);
                            let g = src[oy * out_w + ox];
                            let (gt, gb) = (g * (T::one() - ly), g * ly);
                            dst[y0 * w + x0] += gt * (T::one() - lx);
                            dst[y0 * w + x1] += gt * lx;
                            dst[y1 * w + x0] += gb * (T::one() - lx);
                            dst[y1 * w + x1] += gb * lx;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Source taps `(lo, hi, frac)` for resizing `input` samples to `output`
/// with half-pixel centers, clamped at the borders.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Gradients from one backward pass, keyed by parameter slot or input node.
pub struct Gradients<T> {
    pub params: Vec<(usize, Tensor<T>)>,
    pub inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }
}
