//! Convolutional networks whose filters connect only the channel pairs
//! selected by paths over channel indices.
//!
//! A path contributes one `kh x kw` weight slice to every transition it
//! passes. Paths sharing a channel pair share its slice, as in the fully
//! connected case.
//!
//! Tensors are batches laid out as `(n, c, h, w)`, row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{one_hot, InitMode, Loss, Model, NetError, ParamGroup, WInit};
use crate::qmc::GeneratorMatrixSet;
use crate::real::Real;
use crate::topology::{
    coalesce_edges, generate_pseudo_paths, generate_quasi_paths, generate_quasi_skipping, BoundaryMode, LayerSpec,
    PathTopology, TopologyError,
};

/// Channels and spatial extent of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayerSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self { c_in, c_out, kh: k, kw: k, stride, pad }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, NetError> {
        if input.c != self.c_in || self.stride == 0 || input.h + 2 * self.pad < self.kh || input.w + 2 * self.pad < self.kw {
            return Err(NetError::InvalidNetwork(format!("convolution {self:?} cannot take input {input:?}")));
        }
        Ok(Shape::new(
            self.c_out,
            (input.h + 2 * self.pad - self.kh) / self.stride + 1,
            (input.w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }

    pub fn slice_len(&self) -> usize {
        self.kh * self.kw
    }
}

/// A convolution over a set of (input channel, output channel) slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<R> {
    pub spec: ConvLayerSpec,
    /// All channel pairs, in `(out, in)` order, when not path-sparse.
    pub dense: bool,
    pub from: Vec<u32>,
    pub to: Vec<u32>,
    pub multiplicity: Vec<u32>,
    /// Slice signs of path-sparse layers.
    pub sign: Option<Vec<i8>>,
    /// `slots x kh x kw`.
    pub weights: Vec<R>,
    pub bias: Option<Vec<R>>,
}

impl<R: Real> Conv2d<R> {
    pub fn dense(spec: ConvLayerSpec, bias: bool) -> Self {
        let (mut from, mut to) = (Vec::new(), Vec::new());
        for o in 0..spec.c_out as u32 {
            for i in 0..spec.c_in as u32 {
                from.push(i);
                to.push(o);
            }
        }
        let n = from.len();
        Self {
            spec,
            dense: true,
            from,
            to,
            multiplicity: vec![1; n],
            sign: None,
            weights: vec![R::zero(); n * spec.slice_len()],
            bias: bias.then(|| vec![R::zero(); spec.c_out]),
        }
    }

    /// Slices at the coalesced channel pairs of transition `layer` of `t`.
    pub fn sparse(spec: ConvLayerSpec, t: &PathTopology, layer: usize, bias: bool) -> Result<Self, NetError> {
        let slots = coalesce_edges(t);
        let ts = slots
            .transition(layer)
            .ok_or_else(|| NetError::InvalidNetwork(format!("transition {layer} is not addressed by paths")))?;
        let sizes = t.layers().sizes();
        if sizes[layer - 1] != spec.c_in || sizes[layer] != spec.c_out {
            return Err(NetError::InvalidNetwork(format!("channel topology does not match {spec:?}")));
        }
        let n = ts.edges.len();
        Ok(Self {
            spec,
            dense: false,
            from: ts.edges.iter().map(|e| e.from).collect(),
            to: ts.edges.iter().map(|e| e.to).collect(),
            multiplicity: ts.edges.iter().map(|e| e.multiplicity).collect(),
            sign: Some(ts.edges.iter().map(|e| t.sign(e.owner as usize)).collect()),
            weights: vec![R::zero(); n * spec.slice_len()],
            bias: bias.then(|| vec![R::zero(); spec.c_out]),
        })
    }

    pub fn slots(&self) -> usize {
        self.from.len()
    }

    /// Dense `c_out x c_in x kh x kw` kernel with unselected slices zero.
    pub fn to_dense_kernel(&self) -> Vec<R> {
        let k = self.spec.slice_len();
        let mut kernel = vec![R::zero(); self.spec.c_out * self.spec.c_in * k];
        for s in 0..self.slots() {
            let base = (self.to[s] as usize * self.spec.c_in + self.from[s] as usize) * k;
            kernel[base..base + k].copy_from_slice(&self.weights[s * k..(s + 1) * k]);
        }
        kernel
    }

    /// The zero-filled dense layer computing the same function.
    pub fn dense_equivalent(&self) -> Conv2d<R> {
        let mut d = Conv2d::dense(self.spec, self.bias.is_some());
        d.weights = self.to_dense_kernel();
        d.bias = self.bias.clone();
        d
    }

    pub fn forward(&self, x: &[R], n: usize, input: Shape) -> Result<(Vec<R>, Shape), NetError> {
        let out = self.spec.output_shape(input)?;
        if x.len() != n * input.len() {
            return Err(NetError::InputSize { expected: n * input.len(), got: x.len() });
        }
        let mut y = vec![R::zero(); n * out.len()];
        let k = self.spec.slice_len();
        let plane = out.plane();
        let mut cols = vec![R::zero(); input.c * k * plane];
        for b in 0..n {
            self.im2col(&x[b * input.len()..(b + 1) * input.len()], input, out, &mut cols);
            let yb = &mut y[b * out.len()..(b + 1) * out.len()];
            if let Some(bias) = &self.bias {
                for (o, &v) in bias.iter().enumerate() {
                    yb[o * plane..(o + 1) * plane].iter_mut().for_each(|y| *y = v);
                }
            }
            for s in 0..self.slots() {
                let ci = &cols[self.from[s] as usize * k * plane..][..k * plane];
                let yo = &mut yb[self.to[s] as usize * plane..][..plane];
                for (&w, col) in self.weights[s * k..(s + 1) * k].iter().zip(ci.chunks_exact(plane)) {
                    if w != R::zero() {
                        for (yv, &xv) in yo.iter_mut().zip(col) {
                            *yv += w * xv;
                        }
                    }
                }
            }
        }
        Ok((y, out))
    }

    /// Adds weight and bias gradients; returns the input gradient.
    pub fn backward(&self, x: &[R], n: usize, input: Shape, dy: &[R], gw: &mut [R], gb: Option<&mut [R]>) -> Vec<R> {
        let out = self.spec.output_shape(input).expect("shape checked in forward");
        let k = self.spec.slice_len();
        let plane = out.plane();
        let mut dx = vec![R::zero(); x.len()];
        if let Some(gb) = gb {
            for b in 0..n {
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dy[b * out.len() + o * plane..][..plane].iter().copied().sum::<R>();
                }
            }
        }
        let mut cols = vec![R::zero(); input.c * k * plane];
        let mut dcols = vec![R::zero(); input.c * k * plane];
        for b in 0..n {
            self.im2col(&x[b * input.len()..(b + 1) * input.len()], input, out, &mut cols);
            dcols.iter_mut().for_each(|v| *v = R::zero());
            let dyb = &dy[b * out.len()..(b + 1) * out.len()];
            for s in 0..self.slots() {
                let at = self.from[s] as usize * k * plane;
                let dyo = &dyb[self.to[s] as usize * plane..][..plane];
                for q in 0..k {
                    let col = &cols[at + q * plane..][..plane];
                    gw[s * k + q] += dot(dyo, col);
                    let w = self.weights[s * k + q];
                    for (g, &d) in dcols[at + q * plane..][..plane].iter_mut().zip(dyo) {
                        *g += w * d;
                    }
                }
            }
            self.col2im(&dcols, input, out, &mut dx[b * input.len()..(b + 1) * input.len()]);
        }
        dx
    }

    /// For every input channel, the `kh * kw` shifted copies of its plane
    /// sampled on the output grid, zero where the window leaves the input.
    fn im2col(&self, xb: &[R], input: Shape, out: Shape, cols: &mut [R]) {
        let ConvLayerSpec { kh, kw, stride, pad, .. } = self.spec;
        let plane = out.plane();
        cols.iter_mut().for_each(|v| *v = R::zero());
        for (i, ci) in cols.chunks_exact_mut(kh * kw * plane).enumerate() {
            let xi = &xb[i * input.plane()..][..input.plane()];
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(ky, stride, pad, input.h, out.h);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_span(kx, stride, pad, input.w, out.w);
                    let col = &mut ci[(ky * kw + kx) * plane..][..plane];
                    for oy in oy0..oy1 {
                        let row = &xi[(oy * stride + ky - pad) * input.w..][..input.w];
                        let dst = &mut col[oy * out.w + ox0..oy * out.w + ox1];
                        for (d, &v) in dst.iter_mut().zip(row[ox0 * stride + kx - pad..].iter().step_by(stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the
    /// input planes.
    fn col2im(&self, dcols: &[R], input: Shape, out: Shape, dxb: &mut [R]) {
        let ConvLayerSpec { kh, kw, stride, pad, .. } = self.spec;
        let plane = out.plane();
        for (i, ci) in dcols.chunks_exact(kh * kw * plane).enumerate() {
            let dxi = &mut dxb[i * input.plane()..][..input.plane()];
            for ky in 0..kh {
                let (oy0, oy1) = valid_span(ky, stride, pad, input.h, out.h);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_span(kx, stride, pad, input.w, out.w);
                    let col = &ci[(ky * kw + kx) * plane..][..plane];
                    for oy in oy0..oy1 {
                        let row = &mut dxi[(oy * stride + ky - pad) * input.w..][..input.w];
                        let src = &col[oy * out.w + ox0..oy * out.w + ox1];
                        for (d, &v) in row[ox0 * stride + kx - pad..].iter_mut().step_by(stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `lo..hi` along one axis whose input `o * stride + k -
/// pad` falls inside `0..in_len`.
fn valid_span(k: usize, stride: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = (pad.saturating_sub(k)).div_ceil(stride);
    let hi = if in_len + pad > k { (in_len + pad - k).div_ceil(stride).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Dot product with eight running sums, in a fixed order.
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: R = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<R> {
    pub scale: Vec<R>,
    pub shift: Vec<R>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub eps: f64,
    pub momentum: f64,
}

/// Normalized values and inverse deviations kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<R> {
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![R::one(); channels],
            shift: vec![R::zero(); channels],
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes with batch statistics and updates the running ones.
    pub fn forward_train(&mut self, x: &[R], n: usize, shape: Shape) -> (Vec<R>, BatchNormCache<R>) {
        let plane = shape.plane();
        let count = (n * plane) as f64;
        let mut y = vec![R::zero(); x.len()];
        let mut xhat = vec![R::zero(); x.len()];
        let mut inv_std = vec![R::zero(); shape.c];
        for c in 0..shape.c {
            let values = || (0..n).flat_map(move |b| (0..plane).map(move |p| b * shape.len() + c * plane + p));
            let mean = values().map(|i| x[i].f64()).sum::<f64>() / count;
            let var = values().map(|i| (x[i].f64() - mean).powi(2)).sum::<f64>() / count;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = R::of(is);
            for i in values() {
                let h = R::of((x[i].f64() - mean) * is);
                xhat[i] = h;
                y[i] = self.scale[c] * h + self.shift[c];
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[c] = R::of((1.0 - m) * self.running_mean[c].f64() + m * mean);
            self.running_var[c] = R::of((1.0 - m) * self.running_var[c].f64() + m * unbiased);
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &[R], n: usize, shape: Shape) -> Vec<R> {
        let plane = shape.plane();
        let mut y = x.to_vec();
        for b in 0..n {
            for c in 0..shape.c {
                let is = R::one() / (self.running_var[c] + R::of(self.eps)).sqrt();
                for v in &mut y[b * shape.len() + c * plane..][..plane] {
                    *v = self.scale[c] * (*v - self.running_mean[c]) * is + self.shift[c];
                }
            }
        }
        y
    }

    /// Adds scale and shift gradients; returns the input gradient.
    pub fn backward(&self, cache: &BatchNormCache<R>, dy: &[R], n: usize, shape: Shape, gscale: &mut [R], gshift: &mut [R]) -> Vec<R> {
        let plane = shape.plane();
        let count = R::of((n * plane) as f64);
        let mut dx = vec![R::zero(); dy.len()];
        for c in 0..shape.c {
            let idx = || (0..n).flat_map(move |b| (0..plane).map(move |p| b * shape.len() + c * plane + p));
            let sum_dy: R = idx().map(|i| dy[i]).sum();
            let sum_dy_xhat: R = idx().map(|i| dy[i] * cache.xhat[i]).sum();
            gscale[c] += sum_dy_xhat;
            gshift[c] += sum_dy;
            let k = self.scale[c] * cache.inv_std[c] / count;
            for i in idx() {
                dx[i] = k * (count * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
        dx
    }
}

/// Non-overlapping max pooling with a square window.
pub fn maxpool_forward<R: Real>(x: &[R], n: usize, shape: Shape, size: usize) -> (Vec<R>, Shape, Vec<usize>) {
    let out = Shape::new(shape.c, shape.h / size, shape.w / size);
    let mut y = vec![R::zero(); n * out.len()];
    let mut arg = vec![0; n * out.len()];
    for b in 0..n {
        for c in 0..shape.c {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut best = usize::MAX;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = b * shape.len() + c * shape.plane() + (oy * size + dy) * shape.w + ox * size + dx;
                            if best == usize::MAX || x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    let o = b * out.len() + c * out.plane() + oy * out.w + ox;
                    y[o] = x[best];
                    arg[o] = best;
                }
            }
        }
    }
    (y, out, arg)
}

pub fn maxpool_backward<R: Real>(dy: &[R], argmax: &[usize], input_len: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); input_len];
    for (&d, &i) in dy.iter().zip(argmax) {
        dx[i] += d;
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<R> {
    Conv(Conv2d<R>),
    BatchNorm(BatchNorm<R>),
    Relu,
    MaxPool(usize),
    GlobalAvgPool,
}

#[derive(Debug, Clone)]
enum Cache<R> {
    None,
    BatchNorm(BatchNormCache<R>),
    MaxPool(Vec<usize>),
}

/// A sequence of layers ending in `(classes, 1, 1)` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<R> {
    input: Shape,
    layers: Vec<Layer<R>>,
    /// Input shape of every layer, plus the output shape.
    shapes: Vec<Shape>,
    loss: Loss,
    topology: Option<PathTopology>,
}

impl<R: Real> ConvNet<R> {
    pub fn new(input: Shape, layers: Vec<Layer<R>>, loss: Loss, topology: Option<PathTopology>) -> Result<Self, NetError> {
        let mut shapes = vec![input];
        for layer in &layers {
            let s = *shapes.last().unwrap();
            let next = match layer {
                Layer::Conv(c) => c.spec.output_shape(s)?,
                Layer::BatchNorm(bn) => {
                    if bn.channels() != s.c {
                        return Err(NetError::InvalidNetwork(format!("batch norm over {} channels after {s:?}", bn.channels())));
                    }
                    s
                }
                Layer::Relu => s,
                Layer::MaxPool(k) => {
                    if *k == 0 || s.h < *k || s.w < *k {
                        return Err(NetError::InvalidNetwork(format!("pool {k} on {s:?}")));
                    }
                    Shape::new(s.c, s.h / k, s.w / k)
                }
                Layer::GlobalAvgPool => Shape::new(s.c, 1, 1),
            };
            shapes.push(next);
        }
        let out = *shapes.last().unwrap();
        if out.h != 1 || out.w != 1 {
            return Err(NetError::InvalidNetwork(format!("output shape {out:?} is not a vector")));
        }
        Ok(Self { input, layers, shapes, loss, topology })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer<R>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<R>] {
        &mut self.layers
    }

    pub fn topology(&self) -> Option<&PathTopology> {
        self.topology.as_ref()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d<R>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// The network with every sparse convolution replaced by its
    /// zero-filled dense equivalent.
    pub fn dense_equivalent(&self) -> ConvNet<R> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(c.dense_equivalent()),
                other => other.clone(),
            })
            .collect();
        ConvNet { input: self.input, layers, shapes: self.shapes.clone(), loss: self.loss, topology: None }
    }

    fn check_batch(&self, x: &[R], n: usize) -> Result<(), NetError> {
        if x.len() != n * self.input.len() {
            return Err(NetError::InputSize { expected: n * self.input.len(), got: x.len() });
        }
        Ok(())
    }

    /// Inference-mode logits for a packed batch.
    pub fn forward_eval(&self, x: &[R], n: usize) -> Result<Vec<R>, NetError> {
        self.check_batch(x, n)?;
        let mut cur = x.to_vec();
        for (layer, &shape) in self.layers.iter().zip(&self.shapes) {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur, n, shape)?.0,
                Layer::BatchNorm(bn) => bn.forward_eval(&cur, n, shape),
                Layer::Relu => cur.iter().map(|&v| v.max(R::zero())).collect(),
                Layer::MaxPool(k) => maxpool_forward(&cur, n, shape, *k).0,
                Layer::GlobalAvgPool => global_avg(&cur, n, shape),
            };
        }
        Ok(cur)
    }

    /// Training-mode forward and backward pass over a packed batch of `n`
    /// examples: adds the gradients of the summed loss to `grads`, returns
    /// the summed loss and the logits.
    pub fn forward_backward(&mut self, x: &[R], n: usize, targets: &[Vec<R>], grads: &mut [Vec<R>]) -> Result<(R, Vec<R>), NetError> {
        self.check_batch(x, n)?;
        if grads.len() != self.group_count() {
            return Err(NetError::GradientShape);
        }
        let classes = self.shapes.last().unwrap().c;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (layer, &shape) in self.layers.iter_mut().zip(&self.shapes) {
            let (next, cache) = match layer {
                Layer::Conv(c) => (c.forward(&cur, n, shape)?.0, Cache::None),
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward_train(&cur, n, shape);
                    (y, Cache::BatchNorm(c))
                }
                Layer::Relu => (cur.iter().map(|&v| v.max(R::zero())).collect(), Cache::None),
                Layer::MaxPool(k) => {
                    let (y, _, arg) = maxpool_forward(&cur, n, shape, *k);
                    (y, Cache::MaxPool(arg))
                }
                Layer::GlobalAvgPool => (global_avg(&cur, n, shape), Cache::None),
            };
            inputs.push(std::mem::replace(&mut cur, next));
            caches.push(cache);
        }
        let logits = cur;
        let mut loss = R::zero();
        let mut delta = vec![R::zero(); logits.len()];
        for b in 0..n {
            let t = &targets[b];
            if t.len() != classes {
                return Err(NetError::TargetSize { expected: classes, got: t.len() });
            }
            loss += self.loss.value_and_delta(&logits[b * classes..(b + 1) * classes], t, &mut delta[b * classes..(b + 1) * classes]);
        }
        let offsets = self.group_offsets();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let shape = self.shapes[li];
            let x = &inputs[li];
            delta = match (layer, &caches[li]) {
                (Layer::Conv(c), _) => {
                    let g = offsets[li];
                    let (gw, rest) = grads[g..].split_first_mut().unwrap();
                    let gb = if c.bias.is_some() { Some(rest[0].as_mut_slice()) } else { None };
                    c.backward(x, n, shape, &delta, gw, gb)
                }
                (Layer::BatchNorm(bn), Cache::BatchNorm(cache)) => {
                    let g = offsets[li];
                    let (gs, rest) = grads[g..].split_first_mut().unwrap();
                    bn.backward(cache, &delta, n, shape, gs, &mut rest[0])
                }
                (Layer::Relu, _) => delta.iter().zip(x).map(|(&d, &v)| if v > R::zero() { d } else { R::zero() }).collect(),
                (Layer::MaxPool(_), Cache::MaxPool(arg)) => maxpool_backward(&delta, arg, x.len()),
                (Layer::GlobalAvgPool, _) => {
                    let inv = R::one() / R::of(shape.plane() as f64);
                    let mut dx = vec![R::zero(); x.len()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d = delta[i / shape.plane()] * inv;
                    }
                    dx
                }
                _ => unreachable!("cache kind follows layer kind"),
            };
        }
        Ok((loss, logits))
    }

    /// Index of the first gradient group of every layer.
    fn group_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut g = 0;
        for layer in &self.layers {
            offsets.push(g);
            g += match layer {
                Layer::Conv(c) => 1 + c.bias.is_some() as usize,
                Layer::BatchNorm(_) => 2,
                _ => 0,
            };
        }
        offsets
    }

    fn group_count(&self) -> usize {
        self.zero_grads().len()
    }

    /// Loss of a batch in training mode, without keeping gradients; running
    /// statistics are left untouched.
    pub fn batch_loss(&self, x: &[R], n: usize, targets: &[Vec<R>]) -> Result<R, NetError> {
        let mut scratch = self.clone();
        let mut grads = scratch.zero_grads();
        Ok(scratch.forward_backward(x, n, targets, &mut grads)?.0)
    }
}

fn global_avg<R: Real>(x: &[R], n: usize, shape: Shape) -> Vec<R> {
    let inv = R::one() / R::of(shape.plane() as f64);
    (0..n * shape.c).map(|i| x[i * shape.plane()..][..shape.plane()].iter().copied().sum::<R>() * inv).collect()
}

impl<R: Real> Model<R> for ConvNet<R> {
    fn input_len(&self) -> usize {
        self.input.len()
    }

    fn num_classes(&self) -> usize {
        self.shapes.last().unwrap().c
    }

    fn loss(&self) -> Loss {
        self.loss
    }

    fn zero_grads(&self) -> Vec<Vec<R>> {
        let mut g = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    g.push(vec![R::zero(); c.weights.len()]);
                    if let Some(b) = &c.bias {
                        g.push(vec![R::zero(); b.len()]);
                    }
                }
                Layer::BatchNorm(bn) => {
                    g.push(vec![R::zero(); bn.channels()]);
                    g.push(vec![R::zero(); bn.channels()]);
                }
                _ => {}
            }
        }
        g
    }

    fn accumulate_batch(&mut self, inputs: &[&[R]], labels: &[usize], grads: &mut [Vec<R>]) -> Result<R, NetError> {
        let classes = self.num_classes();
        let mut x = Vec::with_capacity(inputs.len() * self.input.len());
        for input in inputs {
            if input.len() != self.input.len() {
                return Err(NetError::InputSize { expected: self.input.len(), got: input.len() });
            }
            x.extend_from_slice(input);
        }
        let targets = labels
            .iter()
            .map(|&l| if l < classes { Ok(one_hot(l, classes)) } else { Err(NetError::Label { label: l, classes }) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.forward_backward(&x, inputs.len(), &targets, grads)?.0)
    }

    fn logits_batch(&self, inputs: &[&[R]]) -> Result<Vec<Vec<R>>, NetError> {
        let x: Vec<R> = inputs.iter().flat_map(|v| v.iter().copied()).collect();
        let classes = self.num_classes();
        Ok(self.forward_eval(&x, inputs.len())?.chunks(classes).map(|c| c.to_vec()).collect())
    }

    fn param_groups(&mut self) -> Vec<ParamGroup<'_, R>> {
        let mut groups = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    let block = c.spec.slice_len();
                    groups.push(ParamGroup { values: &mut c.weights, sign: c.sign.as_deref(), sign_block: block, decay: true });
                    if let Some(b) = &mut c.bias {
                        groups.push(ParamGroup { values: b, sign: None, sign_block: 1, decay: false });
                    }
                }
                Layer::BatchNorm(bn) => {
                    groups.push(ParamGroup { values: &mut bn.scale, sign: None, sign_block: 1, decay: false });
                    groups.push(ParamGroup { values: &mut bn.shift, sign: None, sign_block: 1, decay: false });
                }
                _ => {}
            }
        }
        groups
    }

    fn mac_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.shapes[1..])
            .map(|(l, out)| match l {
                Layer::Conv(c) => c.weights.len() * out.plane(),
                _ => 0,
            })
            .sum()
    }

    fn nonzero_weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.as_ref().map_or(0, |b| b.len()),
                Layer::BatchNorm(bn) => 2 * bn.channels(),
                _ => 0,
            })
            .sum()
    }

    fn dense_weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.spec.c_in * c.spec.c_out * c.spec.slice_len() + c.bias.as_ref().map_or(0, |b| b.len()),
                Layer::BatchNorm(bn) => 2 * bn.channels(),
                _ => 0,
            })
            .sum()
    }
}

/// Generator of the channel paths.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPaths {
    Pseudo { seed: u64 },
    Quasi { dims: Vec<usize>, scramble_seed: u64 },
    QuasiSkipping { start_dim: usize, scramble_seed: u64 },
}

/// Traces `num_paths` paths over the channel indices of consecutive layers.
/// Quasi topologies connect the boundary transitions fully when asked to.
pub fn trace_conv_paths(
    channels: &[usize],
    num_paths: usize,
    generator: &ChannelPaths,
    boundary: BoundaryMode,
    gm: &GeneratorMatrixSet,
) -> Result<PathTopology, TopologyError> {
    let layers = LayerSpec::new(channels.to_vec(), boundary, boundary)?;
    match generator {
        ChannelPaths::Pseudo { seed } => generate_pseudo_paths(layers, num_paths, *seed),
        ChannelPaths::Quasi { dims, scramble_seed } => generate_quasi_paths(layers, num_paths, gm, dims, *scramble_seed),
        ChannelPaths::QuasiSkipping { start_dim, scramble_seed } => {
            generate_quasi_skipping(layers, num_paths, gm, *start_dim, *scramble_seed)
        }
    }
}

const PRESET_CHANNELS: [usize; 5] = [16, 32, 32, 64, 64];
const PRESET_STRIDES: [usize; 5] = [1, 2, 1, 2, 1];

/// Channel counts `[3, c1..c5, 10]` of the CIFAR-10 preset under a width
/// multiplier.
pub fn preset_channels(width: f64) -> Vec<usize> {
    let mut c = vec![3];
    c.extend(PRESET_CHANNELS.iter().map(|&v| ((v as f64 * width).round() as usize).max(1)));
    c.push(10);
    c
}

/// The CIFAR-10 preset: five 3x3 convolutions (stride 2 on the second and
/// fourth), each followed by batch norm and ReLU, global average pooling
/// and a 1x1 convolution with bias as the classifier. Transitions addressed
/// by `paths` are channel-sparse.
pub fn cifar_preset<R: Real>(width: f64, paths: Option<&PathTopology>) -> Result<ConvNet<R>, NetError> {
    let channels = preset_channels(width);
    if let Some(t) = paths {
        if t.layers().sizes() != channels.as_slice() {
            return Err(NetError::InvalidNetwork(format!("channel topology {:?} does not match {channels:?}", t.layers().sizes())));
        }
    }
    let conv = |t: usize, spec: ConvLayerSpec, bias: bool| -> Result<Conv2d<R>, NetError> {
        match paths {
            Some(p) if p.layers().is_path_transition(t) => Conv2d::sparse(spec, p, t, bias),
            _ => Ok(Conv2d::dense(spec, bias)),
        }
    };
    let mut layers = Vec::new();
    for t in 1..=5 {
        let spec = ConvLayerSpec::new(channels[t - 1], channels[t], 3, PRESET_STRIDES[t - 1], 1);
        layers.push(Layer::Conv(conv(t, spec, false)?));
        layers.push(Layer::BatchNorm(BatchNorm::new(channels[t])));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Conv(conv(6, ConvLayerSpec::new(channels[5], 10, 1, 1, 0), true)?));
    ConvNet::new(Shape::new(3, 32, 32), layers, Loss::SoftmaxCrossEntropy, paths.cloned())
}

/// Initializes convolution weights by `mode`, with fans counted in slice
/// elements; biases 0, batch-norm scale 1 and shift 0.
pub fn init_conv_weights<R: Real>(net: &mut ConvNet<R>, mode: InitMode, winit: WInit) {
    let conv_idx: Vec<usize> = net.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Conv(_))).map(|(i, _)| i).collect();
    let conv_at = |net: &ConvNet<R>, i: usize| match &net.layers[i] {
        Layer::Conv(c) => c.clone(),
        _ => unreachable!(),
    };
    let mut rng = match mode {
        InitMode::UniformRandom { seed } | InitMode::ConstantRandomSign { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for (n, &li) in conv_idx.iter().enumerate() {
        let c = conv_at(net, li);
        let k = c.spec.slice_len();
        let mut fan_in = vec![0usize; c.spec.c_out];
        for &o in &c.to {
            fan_in[o as usize] += k;
        }
        let mut fan_out = vec![0usize; c.spec.c_out];
        if let Some(&next) = conv_idx.get(n + 1) {
            let nc = conv_at(net, next);
            for &i in &nc.from {
                fan_out[i as usize] += nc.spec.slice_len();
            }
        }
        let Layer::Conv(c) = &mut net.layers[li] else { unreachable!() };
        for s in 0..c.slots() {
            let o = c.to[s] as usize;
            let m = winit.value(fan_in[o], fan_out[o]);
            let slice_sign = match mode {
                InitMode::ConstantAlternatingSign => Some(if c.from[s] % 2 == 1 { 1.0 } else { -1.0 }),
                InitMode::ConstantSignAlongPath => Some(c.sign.as_ref().map_or(1.0, |sg| sg[s] as f64)),
                InitMode::ConstantPositive => Some(1.0),
                _ => None,
            };
            for w in &mut c.weights[s * k..(s + 1) * k] {
                let v = match (mode, slice_sign) {
                    (_, Some(sign)) => sign * m,
                    (InitMode::UniformRandom { .. }, None) => rng.as_mut().unwrap().gen_range(-m..m),
                    _ => {
                        if rng.as_mut().unwrap().gen::<bool>() {
                            m
                        } else {
                            -m
                        }
                    }
                };
                *w = R::of(v);
            }
        }
        if let Some(b) = &mut c.bias {
            b.iter_mut().for_each(|v| *v = R::zero());
        }
    }
    for layer in &mut net.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.scale.iter_mut().for_each(|v| *v = R::one());
            bn.shift.iter_mut().for_each(|v| *v = R::zero());
        }
    }
}
