//! A small CPU convolutional network toolkit with explicit backward passes.
//!
//! Only what the two stage backends need: same-padded 3×3 and 1×1
//! convolutions, non-overlapping patch convolutions, ReLU, 2×2 max pooling,
//! nearest upsampling, channel concatenation, a configurable U-Net, the
//! class-weighted logistic loss and Adam. Tensors are single samples laid
//! out `(channels, height, width)`; batching happens one level up.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    fn row(&self, c: usize, y: usize) -> &[f32] {
        let off = (c * self.h + y) * self.w;
        &self.data[off..off + self.w]
    }
}

// ---- row kernels -----------------------------------------------------------

/// `dst[x] += w0·src[x−1] + w1·src[x] + w2·src[x+1]` with zero padding.
#[inline]
fn row_acc3(dst: &mut [f32], src: &[f32], w: [f32; 3]) {
    let n = dst.len();
    if n == 1 {
        dst[0] += w[1] * src[0];
        return;
    }
    dst[0] += w[1] * src[0] + w[2] * src[1];
    dst[n - 1] += w[0] * src[n - 2] + w[1] * src[n - 1];
    let inner = &mut dst[1..n - 1];
    let a = &src[..n - 2];
    let b = &src[1..n - 1];
    let c = &src[2..];
    for (((d, &a), &b), &c) in inner.iter_mut().zip(a).zip(b).zip(c) {
        *d += w[0] * a + w[1] * b + w[2] * c;
    }
}

#[inline]
fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

// ---- convolution -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Stride 1, zero padding `k / 2`; `k` is 1 or 3.
    Same(usize),
    /// Kernel = stride = `p`, no padding.
    Patch(usize),
}

impl ConvKind {
    fn taps(self) -> usize {
        match self {
            ConvKind::Same(k) | ConvKind::Patch(k) => k * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    /// `[cout][cin][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    fn zeros_like(conv: &Conv) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    fn add(&mut self, other: &ConvGrad) {
        axpy(&mut self.weight, &other.weight, 1.0);
        axpy(&mut self.bias, &other.bias, 1.0);
    }

    fn scale(&mut self, s: f32) {
        self.weight.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(kind: ConvKind, cin: usize, cout: usize, rng: &mut R) -> Self {
        if let ConvKind::Same(k) = kind {
            assert!(k == 1 || k == 3, "same-padded kernels must be 1 or 3");
        }
        let fan_in = (cin * kind.taps()) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = (0..cout * cin * kind.taps())
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self {
            kind,
            cin,
            cout,
            weight,
            bias: vec![0.0; cout],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Same(_) => (h, w),
            ConvKind::Patch(p) => (h / p, w / p),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(self.cout, oh, ow);
        let taps = self.kind.taps();
        match self.kind {
            ConvKind::Same(3) => {
                for co in 0..self.cout {
                    let b = self.bias[co];
                    let plane = out.plane_mut(co);
                    plane.fill(b);
                    for y in 0..oh {
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for ci in 0..self.cin {
                            let wk = &self.weight[(co * self.cin + ci) * 9..][..9];
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= x.h as isize {
                                    continue;
                                }
                                row_acc3(dst, x.row(ci, sy as usize), [wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]]);
                            }
                        }
                    }
                }
            }
            ConvKind::Same(_) => {
                for co in 0..self.cout {
                    let b = self.bias[co];
                    let plane = out.plane_mut(co);
                    plane.fill(b);
                    for ci in 0..self.cin {
                        axpy(plane, x.plane(ci), self.weight[co * self.cin + ci]);
                    }
                }
            }
            ConvKind::Patch(p) => {
                for co in 0..self.cout {
                    let b = self.bias[co];
                    let plane = out.plane_mut(co);
                    plane.fill(b);
                    for ci in 0..self.cin {
                        let wk = &self.weight[(co * self.cin + ci) * taps..][..taps];
                        let src = x.plane(ci);
                        for y in 0..oh {
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for ky in 0..p {
                                let srow = &src[(p * y + ky) * x.w..][..x.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    let s = &srow[p * ox..p * ox + p];
                                    let mut acc = 0.0;
                                    for kx in 0..p {
                                        acc += wk[ky * p + kx] * s[kx];
                                    }
                                    *d += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, grad: &mut ConvGrad, need_input: bool) -> Option<Tensor> {
        let (oh, ow) = (gy.h, gy.w);
        let taps = self.kind.taps();
        for co in 0..self.cout {
            grad.bias[co] += gy.plane(co).iter().sum::<f32>();
        }
        let mut gx = need_input.then(|| Tensor::zeros(x.c, x.h, x.w));
        match self.kind {
            ConvKind::Same(3) => {
                let n = x.w;
                for co in 0..self.cout {
                    for ci in 0..self.cin {
                        let gw = &mut grad.weight[(co * self.cin + ci) * 9..][..9];
                        for ky in 0..3 {
                            let (mut g0, mut g1, mut g2) = (0.0f32, 0.0f32, 0.0f32);
                            for y in 0..oh {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= x.h as isize {
                                    continue;
                                }
                                let g = gy.row(co, y);
                                let s = x.row(ci, sy as usize);
                                g1 += dot(g, s);
                                if n > 1 {
                                    g0 += dot(&g[1..], &s[..n - 1]);
                                    g2 += dot(&g[..n - 1], &s[1..]);
                                }
                            }
                            gw[ky * 3] += g0;
                            gw[ky * 3 + 1] += g1;
                            gw[ky * 3 + 2] += g2;
                        }
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for ci in 0..self.cin {
                        for y in 0..x.h {
                            let off = (ci * x.h + y) * x.w;
                            for co in 0..self.cout {
                                let wk = &self.weight[(co * self.cin + ci) * 9..][..9];
                                for ky in 0..3 {
                                    // output row y' = y − ky + 1 reads input row y through tap ky
                                    let oy = y as isize - ky as isize + 1;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let g = gy.row(co, oy as usize);
                                    let dst = &mut gx.data[off..off + x.w];
                                    row_acc3(dst, g, [wk[ky * 3 + 2], wk[ky * 3 + 1], wk[ky * 3]]);
                                }
                            }
                        }
                    }
                }
            }
            ConvKind::Same(_) => {
                for co in 0..self.cout {
                    for ci in 0..self.cin {
                        grad.weight[co * self.cin + ci] += dot(gy.plane(co), x.plane(ci));
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for ci in 0..self.cin {
                        for co in 0..self.cout {
                            let wv = self.weight[co * self.cin + ci];
                            let src = gy.plane(co);
                            axpy(gx.plane_mut(ci), src, wv);
                        }
                    }
                }
            }
            ConvKind::Patch(p) => {
                for co in 0..self.cout {
                    let g = gy.plane(co);
                    for ci in 0..self.cin {
                        let src = x.plane(ci);
                        let base = (co * self.cin + ci) * taps;
                        for ky in 0..p {
                            for kx in 0..p {
                                let mut acc = 0.0f32;
                                for y in 0..oh {
                                    let srow = &src[(p * y + ky) * x.w..];
                                    let grow = &g[y * ow..(y + 1) * ow];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc += gv * srow[p * ox + kx];
                                    }
                                }
                                grad.weight[base + ky * p + kx] += acc;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wk = &self.weight[base..base + taps];
                            let dst = gx.plane_mut(ci);
                            for y in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[y * ow + ox];
                                    for ky in 0..p {
                                        for kx in 0..p {
                                            dst[(p * y + ky) * x.w + p * ox + kx] += gv * wk[ky * p + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

// ---- elementwise and resampling ops ----------------------------------------

pub fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `g` where the post-activation value was not positive.
pub fn relu_backward_inplace(g: &mut Tensor, activated: &Tensor) {
    for (g, &a) in g.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling; also returns the flat input index of each maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..oh {
            for xo in 0..ow {
                let cand = [
                    base + (2 * y) * x.w + 2 * xo,
                    base + (2 * y) * x.w + 2 * xo + 1,
                    base + (2 * y + 1) * x.w + 2 * xo,
                    base + (2 * y + 1) * x.w + 2 * xo + 1,
                ];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * oh + y) * ow + xo;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(g: &Tensor, arg: &[u32], input_shape: (usize, usize, usize)) -> Tensor {
    let (c, h, w) = input_shape;
    let mut gx = Tensor::zeros(c, h, w);
    for (&gv, &i) in g.data.iter().zip(arg) {
        gx.data[i as usize] += gv;
    }
    gx
}

pub fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let (oh, ow) = (x.h * f, x.w * f);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            let src = x.row(c, y / f);
            let off = (c * oh + y) * ow;
            for (xo, d) in out.data[off..off + ow].iter_mut().enumerate() {
                *d = src[xo / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(g: &Tensor, f: usize) -> Tensor {
    let (h, w) = (g.h / f, g.w / f);
    let mut gx = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            let src = g.row(c, y);
            let off = (c * h + y / f) * w;
            let dst = &mut gx.data[off..off + w];
            for (xo, &v) in src.iter().enumerate() {
                dst[xo / f] += v;
            }
        }
    }
    gx
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial shape");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn split(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let n = first * g.h * g.w;
    (
        Tensor::from_vec(first, g.h, g.w, g.data[..n].to_vec()),
        Tensor::from_vec(g.c - first, g.h, g.w, g.data[n..].to_vec()),
    )
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f32) -> f32 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean class-weighted binary cross-entropy on logits and its gradient.
/// Positive targets are weighted by `pos_weight`.
pub fn weighted_bce_with_logits(logits: &[f32], target: &[f32], pos_weight: f32) -> (f32, Vec<f32>) {
    let n = logits.len().max(1) as f32;
    let mut loss = 0.0f64;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            loss += (pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z)) as f64;
            (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n
        })
        .collect();
    ((loss / n as f64) as f32, grad)
}

// ---- U-Net -----------------------------------------------------------------

/// Encoder-decoder with skip connections. `widths[i]` is the channel count
/// at level `i`; there are `widths.len() − 1` pooling steps.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Encoder convs (2 per level), decoder convs (2 per level except the
    /// deepest), then the 1×1 head.
    pub convs: Vec<Conv>,
}

pub struct UNetCache {
    input: Tensor,
    enc_a: Vec<Tensor>,
    enc_b: Vec<Tensor>,
    pool_arg: Vec<Vec<u32>>,
    pooled: Vec<Tensor>,
    dec_cat: Vec<Tensor>,
    dec_a: Vec<Tensor>,
    dec_b: Vec<Tensor>,
}

impl UNet {
    pub fn new<R: Rng>(in_channels: usize, widths: &[usize], rng: &mut R) -> Self {
        assert!(!widths.is_empty(), "U-Net needs at least one level");
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for &w in widths {
            convs.push(Conv::new(ConvKind::Same(3), cin, w, rng));
            convs.push(Conv::new(ConvKind::Same(3), w, w, rng));
            cin = w;
        }
        for i in 0..widths.len() - 1 {
            convs.push(Conv::new(ConvKind::Same(3), widths[i + 1] + widths[i], widths[i], rng));
            convs.push(Conv::new(ConvKind::Same(3), widths[i], widths[i], rng));
        }
        convs.push(Conv::new(ConvKind::Same(1), widths[0], 1, rng));
        Self {
            in_channels,
            widths: widths.to_vec(),
            convs,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn enc(&self, level: usize, j: usize) -> &Conv {
        &self.convs[2 * level + j]
    }

    fn dec(&self, level: usize, j: usize) -> &Conv {
        &self.convs[2 * self.levels() + 2 * level + j]
    }

    fn head(&self) -> &Conv {
        self.convs.last().expect("head conv")
    }

    pub fn head_mut(&mut self) -> &mut Conv {
        self.convs.last_mut().expect("head conv")
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, UNetCache) {
        let l = self.levels();
        let mut cache = UNetCache {
            input: x.clone(),
            enc_a: Vec::with_capacity(l),
            enc_b: Vec::with_capacity(l),
            pool_arg: Vec::new(),
            pooled: Vec::new(),
            dec_cat: vec![Tensor::zeros(0, 0, 0); l.saturating_sub(1)],
            dec_a: vec![Tensor::zeros(0, 0, 0); l.saturating_sub(1)],
            dec_b: vec![Tensor::zeros(0, 0, 0); l.saturating_sub(1)],
        };
        for i in 0..l {
            let input = if i == 0 { x } else { &cache.pooled[i - 1] };
            let mut a = self.enc(i, 0).forward(input);
            relu_inplace(&mut a);
            let mut b = self.enc(i, 1).forward(&a);
            relu_inplace(&mut b);
            cache.enc_a.push(a);
            if i + 1 < l {
                let (p, arg) = maxpool2(&b);
                cache.pooled.push(p);
                cache.pool_arg.push(arg);
            }
            cache.enc_b.push(b);
        }
        let mut up_src = cache.enc_b[l - 1].clone();
        for i in (0..l - 1).rev() {
            let up = upsample_nearest(&up_src, 2);
            let cat = concat(&up, &cache.enc_b[i]);
            let mut a = self.dec(i, 0).forward(&cat);
            relu_inplace(&mut a);
            let mut b = self.dec(i, 1).forward(&a);
            relu_inplace(&mut b);
            cache.dec_cat[i] = cat;
            cache.dec_a[i] = a;
            up_src = b.clone();
            cache.dec_b[i] = b;
        }
        let logits = self.head().forward(&up_src);
        (logits, cache)
    }

    /// Backpropagates `g_logits`, accumulating into `grads` (same order as
    /// `convs`). Returns the input gradient when requested.
    pub fn backward(&self, cache: &UNetCache, g_logits: &Tensor, grads: &mut [ConvGrad], need_input: bool) -> Option<Tensor> {
        let l = self.levels();
        let nconv = self.convs.len();
        let top = if l > 1 { &cache.dec_b[0] } else { &cache.enc_b[0] };
        let mut g = self
            .head()
            .backward(top, g_logits, &mut grads[nconv - 1], true)
            .expect("input grad");
        // decoder, shallow to deep
        let mut g_skip: Vec<Option<Tensor>> = vec![None; l];
        for i in 0..l.saturating_sub(1) {
            relu_backward_inplace(&mut g, &cache.dec_b[i]);
            let idx = 2 * l + 2 * i;
            let mut ga = self.dec(i, 1).backward(&cache.dec_a[i], &g, &mut grads[idx + 1], true).expect("grad");
            relu_backward_inplace(&mut ga, &cache.dec_a[i]);
            let gcat = self.dec(i, 0).backward(&cache.dec_cat[i], &ga, &mut grads[idx], true).expect("grad");
            let (gu, gs) = split(&gcat, self.widths[i + 1]);
            g_skip[i] = Some(gs);
            g = upsample_nearest_backward(&gu, 2);
        }
        // encoder, deep to shallow; `g` now holds the gradient of the deepest block output
        let mut g_b = g;
        let mut g_input = None;
        for i in (0..l).rev() {
            if let Some(gs) = g_skip[i].take() {
                axpy(&mut g_b.data, &gs.data, 1.0);
            }
            relu_backward_inplace(&mut g_b, &cache.enc_b[i]);
            let mut ga = self.enc(i, 1).backward(&cache.enc_a[i], &g_b, &mut grads[2 * i + 1], true).expect("grad");
            relu_backward_inplace(&mut ga, &cache.enc_a[i]);
            let input = if i == 0 { &cache.input } else { &cache.pooled[i - 1] };
            let need = i > 0 || need_input;
            let gx = self.enc(i, 0).backward(input, &ga, &mut grads[2 * i], need);
            if i > 0 {
                let gp = gx.expect("grad");
                let b = &cache.enc_b[i - 1];
                g_b = maxpool2_backward(&gp, &cache.pool_arg[i - 1], (b.c, b.h, b.w));
            } else {
                g_input = gx;
            }
        }
        g_input
    }
}

pub fn zero_grads(convs: &[Conv]) -> Vec<ConvGrad> {
    convs.iter().map(ConvGrad::zeros_like).collect()
}

/// Sums per-sample gradients in order and divides by the sample count.
pub fn mean_grads(per_sample: Vec<Vec<ConvGrad>>) -> Option<Vec<ConvGrad>> {
    let n = per_sample.len();
    let mut it = per_sample.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add(b);
        }
    }
    let s = 1.0 / n as f32;
    acc.iter_mut().for_each(|g| g.scale(s));
    Some(acc)
}

// ---- optimiser -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<ConvGrad>,
    v: Vec<ConvGrad>,
}

impl Adam {
    pub fn new(convs: &[Conv]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zero_grads(convs),
            v: zero_grads(convs),
        }
    }

    pub fn step(&mut self, convs: &mut [Conv], grads: &[ConvGrad], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (((conv, g), m), v) in convs.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            update(&mut conv.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut conv.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

// ---- serialisation ---------------------------------------------------------

pub(crate) fn write_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f32s(w: &mut dyn Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s(r: &mut dyn Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the parameters of `convs` in order, each prefixed by its shape.
pub fn write_convs(w: &mut dyn Write, convs: &[Conv]) -> Result<()> {
    write_u32(w, convs.len() as u32)?;
    for c in convs {
        let (tag, k) = match c.kind {
            ConvKind::Same(k) => (0, k),
            ConvKind::Patch(p) => (1, p),
        };
        for v in [tag, k as u32, c.cin as u32, c.cout as u32] {
            write_u32(w, v)?;
        }
        write_f32s(w, &c.weight)?;
        write_f32s(w, &c.bias)?;
    }
    Ok(())
}

/// Reads parameters into `convs`, which must already have matching shapes.
pub fn read_convs_into(r: &mut dyn Read, convs: &mut [Conv]) -> Result<()> {
    let n = read_u32(r)? as usize;
    if n != convs.len() {
        return Err(Error::InvalidArgument(format!(
            "weights file has {n} layers, architecture expects {}",
            convs.len()
        )));
    }
    for c in convs.iter_mut() {
        let tag = read_u32(r)?;
        let k = read_u32(r)? as usize;
        let cin = read_u32(r)? as usize;
        let cout = read_u32(r)? as usize;
        let kind = if tag == 0 { ConvKind::Same(k) } else { ConvKind::Patch(k) };
        if kind != c.kind || cin != c.cin || cout != c.cout {
            return Err(Error::InvalidArgument(
                "weights file layer shape does not match the architecture".into(),
            ));
        }
        c.weight = read_f32s(r, c.weight.len())?;
        c.bias = read_f32s(r, c.bias.len())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(c, h, w, data)
    }

    /// Direct definition of a same-padded convolution, for checking.
    fn naive_conv(conv: &Conv, x: &Tensor) -> Tensor {
        let k = match conv.kind {
            ConvKind::Same(k) => k,
            ConvKind::Patch(_) => unreachable!(),
        };
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        for co in 0..conv.cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut s = conv.bias[co] as f64;
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                s += conv.weight[((co * conv.cin + ci) * k + ky) * k + kx] as f64
                                    * x.data[(ci * x.h + sy as usize) * x.w + sx as usize] as f64;
                            }
                        }
                    }
                    out.data[(co * x.h + y) * x.w + xx] = s as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [ConvKind::Same(3), ConvKind::Same(1)] {
            let mut conv = Conv::new(kind, 3, 2, &mut rng);
            conv.bias = vec![0.1, -0.2];
            let x = rand_tensor(3, 7, 9, &mut rng);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }

    /// Finite-difference check of a scalar objective `sum(out · probe)`.
    fn check_grads(conv: &Conv, x: &Tensor, rng: &mut ChaCha8Rng) {
        let out = conv.forward(x);
        let probe = rand_tensor(out.c, out.h, out.w, rng);
        let objective = |c: &Conv, x: &Tensor| -> f64 {
            c.forward(x).data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut grad = ConvGrad::zeros_like(conv);
        let gx = conv.backward(x, &probe, &mut grad, true).unwrap();
        let eps = 1e-2f32;
        for i in (0..conv.weight.len()).step_by(3) {
            let mut c2 = conv.clone();
            c2.weight[i] += eps;
            let up = objective(&c2, x);
            c2.weight[i] -= 2.0 * eps;
            let down = objective(&c2, x);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - grad.weight[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "w{i}: {fd} vs {}", grad.weight[i]);
        }
        for i in (0..x.data.len()).step_by(5) {
            let mut x2 = x.clone();
            x2.data[i] += eps;
            let up = objective(conv, &x2);
            x2.data[i] -= 2.0 * eps;
            let down = objective(conv, &x2);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - gx.data[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()), "x{i}: {fd} vs {}", gx.data[i]);
        }
        let fd_b: f64 = probe.plane(0).iter().map(|&v| v as f64).sum();
        assert!((fd_b - grad.bias[0] as f64).abs() < 1e-3);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [ConvKind::Same(3), ConvKind::Same(1), ConvKind::Patch(4), ConvKind::Patch(2)] {
            let conv = Conv::new(kind, 2, 3, &mut rng);
            let x = rand_tensor(2, 8, 12, &mut rng);
            check_grads(&conv, &x, &mut rng);
        }
    }

    #[test]
    fn unet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = UNet::new(2, &[3, 4, 4], &mut rng);
        net.head_mut().bias[0] = 0.3;
        let x = rand_tensor(2, 8, 8, &mut rng);
        let target: Vec<f32> = (0..64).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
        let loss_of = |n: &UNet, x: &Tensor| weighted_bce_with_logits(&n.forward(x).data, &target, 3.0).0 as f64;
        let (logits, cache) = net.forward_cached(&x);
        let (_, g) = weighted_bce_with_logits(&logits.data, &target, 3.0);
        let mut grads = zero_grads(&net.convs);
        let gx = net.backward(&cache, &Tensor::from_vec(1, 8, 8, g), &mut grads, true).unwrap();
        let eps = 1e-2f32;
        for li in [0usize, 3, 5, 7, net.convs.len() - 1] {
            for wi in [0usize, 1, net.convs[li].weight.len() - 1] {
                let mut n2 = net.clone();
                n2.convs[li].weight[wi] += eps;
                let up = loss_of(&n2, &x);
                n2.convs[li].weight[wi] -= 2.0 * eps;
                let down = loss_of(&n2, &x);
                let fd = (up - down) / (2.0 * eps as f64);
                let an = grads[li].weight[wi] as f64;
                assert!((fd - an).abs() < 5e-3 + 5e-2 * fd.abs(), "layer {li} w{wi}: fd {fd} vs {an}");
            }
        }
        for xi in [0usize, 17, 100] {
            let mut x2 = x.clone();
            x2.data[xi] += eps;
            let up = loss_of(&net, &x2);
            x2.data[xi] -= 2.0 * eps;
            let down = loss_of(&net, &x2);
            let fd = (up - down) / (2.0 * eps as f64);
            assert!((fd - gx.data[xi] as f64).abs() < 5e-3 + 5e-2 * fd.abs());
        }
    }

    #[test]
    fn pooling_and_upsampling_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(2, 4, 6, &mut rng);
        let up = upsample_nearest(&x, 2);
        assert_eq!((up.h, up.w), (8, 12));
        let g = rand_tensor(2, 8, 12, &mut rng);
        let back = upsample_nearest_backward(&g, 2);
        let lhs: f32 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
        let (p, arg) = maxpool2(&x);
        assert_eq!((p.h, p.w), (2, 3));
        for (i, &a) in arg.iter().enumerate() {
            assert_eq!(p.data[i], x.data[a as usize]);
        }
    }

    #[test]
    fn bce_gradient_and_weighting() {
        let z = [0.3f32, -1.2, 2.0];
        let y = [1.0f32, 0.0, 1.0];
        let (l, g) = weighted_bce_with_logits(&z, &y, 5.0);
        let eps = 1e-3;
        for i in 0..3 {
            let mut z2 = z;
            z2[i] += eps;
            let (l2, _) = weighted_bce_with_logits(&z2, &y, 5.0);
            assert!(((l2 - l) / eps - g[i]).abs() < 1e-2);
        }
    }

    #[test]
    fn adam_decreases_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut convs = vec![Conv::new(ConvKind::Same(1), 1, 1, &mut rng)];
        convs[0].weight[0] = 3.0;
        let mut adam = Adam::new(&convs);
        for _ in 0..200 {
            let w = convs[0].weight[0];
            let g = vec![ConvGrad { weight: vec![2.0 * w], bias: vec![0.0] }];
            adam.step(&mut convs, &g, 0.05);
        }
        assert!(convs[0].weight[0].abs() < 0.1);
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = UNet::new(4, &[2, 3], &mut rng);
        let mut buf = Vec::new();
        write_convs(&mut buf, &net.convs).unwrap();
        let mut other = UNet::new(4, &[2, 3], &mut ChaCha8Rng::seed_from_u64(7));
        read_convs_into(&mut buf.as_slice(), &mut other.convs).unwrap();
        assert_eq!(other, net);
        let mut wrong = UNet::new(4, &[2, 4], &mut rng);
        assert!(read_convs_into(&mut buf.as_slice(), &mut wrong.convs).is_err());
    }
}
