//! Layers: conv2d, linear, group norm, cross-attention, activations,
//! resampling. Every layer returns a cache from `forward` that its
//! `backward` consumes.

use super::{c, Scalar};
use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha12Rng;

/// Re-layout a matrix into standard (row-major) order if needed.
/// `dot` against a transposed view can yield column-major output.
pub fn std2<F: Scalar>(a: Array2<F>) -> Array2<F> {
    if a.as_slice().is_some() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().cloned().collect()).unwrap()
    }
}

/// Fill a fresh array with N(0, std) draws.
pub fn randn2<F: Scalar>(rng: &mut ChaCha12Rng, shape: (usize, usize), std: f64) -> Array2<F> {
    let mut a = Array2::<F>::zeros(shape);
    for v in a.iter_mut() {
        *v = F::randn(rng) * c(std);
    }
    a
}

pub fn randn3<F: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: (usize, usize, usize),
    std: f64,
) -> Array3<F> {
    let mut a = Array3::<F>::zeros(shape);
    for v in a.iter_mut() {
        *v = F::randn(rng) * c(std);
    }
    a
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D convolution over (H, W, C) images, zero padding, square kernel.
/// Weight layout is (k*k*cin, cout) matching im2col column order.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<F> {
    cols: Array2<F>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(rng: &mut ChaCha12Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = (k * k * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            weight: randn2(rng, (k * k * cin, cout), std),
            bias: Array1::zeros(cout),
            k,
            stride,
            pad: k / 2,
            cin,
            cout,
        }
    }

    /// Final-layer variant initialized to zero so the network starts as the
    /// zero map.
    pub fn new_zeroed(cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((k * k * cin, cout)),
            bias: Array1::zeros(cout),
            k,
            stride: 1,
            pad: k / 2,
            cin,
            cout,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<F>) -> (Array2<F>, usize, usize) {
        let (h, w, cin) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::<F>::zeros((oh * ow, self.k * self.k * cin));
        let xs = x.as_slice().expect("conv input must be standard layout");
        let cs = cols.as_slice_mut().unwrap();
        let row_len = self.k * self.k * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * row_len;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * cin;
                        let dst = row + (ky * self.k + kx) * cin;
                        cs[dst..dst + cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, Conv2dCache<F>) {
        let (h, w, _) = x.dim();
        let (cols, oh, ow) = self.im2col(x);
        let mut flat = cols.dot(&self.weight);
        for mut row in flat.rows_mut() {
            row += &self.bias;
        }
        let y = flat.into_shape_with_order((oh, ow, self.cout)).unwrap();
        (
            y,
            Conv2dCache {
                cols,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Input gradient; accumulates parameter gradients when `grads` is given.
    pub fn backward(
        &self,
        cache: &Conv2dCache<F>,
        dy: &Array3<F>,
        grads: Option<&mut Self>,
    ) -> Array3<F> {
        let (oh, ow) = (cache.out_h, cache.out_w);
        let dy_flat = dy
            .to_owned()
            .into_shape_with_order((oh * ow, self.cout))
            .unwrap();
        if let Some(g) = grads {
            g.weight = &g.weight + &cache.cols.t().dot(&dy_flat);
            g.bias = &g.bias + &dy_flat.sum_axis(Axis(0));
        }
        let dcols = std2(dy_flat.dot(&self.weight.t()));
        // col2im scatter-add
        let (h, w, cin) = (cache.in_h, cache.in_w, self.cin);
        let mut dx = Array3::<F>::zeros((h, w, cin));
        let dxs = dx.as_slice_mut().unwrap();
        let ds = dcols.as_slice().unwrap();
        let row_len = self.k * self.k * cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * row_len;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * cin;
                        let src = row + (ky * self.k + kx) * cin;
                        for ci in 0..cin {
                            dxs[dst + ci] = dxs[dst + ci] + ds[src + ci];
                        }
                    }
                }
            }
        }
        dx
    }

    /// Zeroed copy of this layer, used as a gradient accumulator.
    pub fn zero_grads(&self) -> Self {
        let mut g = self.clone();
        g.weight.fill(F::zero());
        g.bias.fill(F::zero());
        g
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer over row vectors: y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<F> {
    x: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            weight: randn2(rng, (d_in, d_out), std),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.weight);
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &LinearCache<F>,
        dy: &Array2<F>,
        grads: Option<&mut Self>,
    ) -> Array2<F> {
        if let Some(g) = grads {
            g.weight = &g.weight + &cache.x.t().dot(dy);
            g.bias = &g.bias + &dy.sum_axis(Axis(0));
        }
        std2(dy.dot(&self.weight.t()))
    }

    pub fn zero_grads(&self) -> Self {
        let mut g = self.clone();
        g.weight.fill(F::zero());
        g.bias.fill(F::zero());
        g
    }
}

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

/// Group normalization over a single (H, W, C) image.
#[derive(Debug, Clone)]
pub struct GroupNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub groups: usize,
    pub eps: F,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<F> {
    xhat: Array3<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            groups,
            eps: c(1e-5),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, GroupNormCache<F>) {
        let (h, w, ch) = x.dim();
        let cg = ch / self.groups;
        let n = c::<F>((h * w * cg) as f64);
        let mut xhat = Array3::<F>::zeros((h, w, ch));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let cs = g * cg;
            let mut mean = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    for ci in cs..cs + cg {
                        mean = mean + x[[y, xx, ci]];
                    }
                }
            }
            mean = mean / n;
            let mut var = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    for ci in cs..cs + cg {
                        let d = x[[y, xx, ci]] - mean;
                        var = var + d * d;
                    }
                }
            }
            var = var / n;
            let istd = F::one() / (var + self.eps).sqrt();
            inv_std.push(istd);
            for y in 0..h {
                for xx in 0..w {
                    for ci in cs..cs + cg {
                        xhat[[y, xx, ci]] = (x[[y, xx, ci]] - mean) * istd;
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for y in 0..h {
            for xx in 0..w {
                for ci in 0..ch {
                    out[[y, xx, ci]] = xhat[[y, xx, ci]] * self.gamma[ci] + self.beta[ci];
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache<F>,
        dy: &Array3<F>,
        grads: Option<&mut Self>,
    ) -> Array3<F> {
        let (h, w, ch) = dy.dim();
        let cg = ch / self.groups;
        let n = c::<F>((h * w * cg) as f64);
        if let Some(g) = grads {
            for y in 0..h {
                for xx in 0..w {
                    for ci in 0..ch {
                        g.gamma[ci] = g.gamma[ci] + dy[[y, xx, ci]] * cache.xhat[[y, xx, ci]];
                        g.beta[ci] = g.beta[ci] + dy[[y, xx, ci]];
                    }
                }
            }
        }
        let mut dx = Array3::<F>::zeros((h, w, ch));
        for gi in 0..self.groups {
            let cs = gi * cg;
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for y in 0..h {
                for xx in 0..w {
                    for ci in cs..cs + cg {
                        let dxhat = dy[[y, xx, ci]] * self.gamma[ci];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * cache.xhat[[y, xx, ci]];
                    }
                }
            }
            let istd = cache.inv_std[gi];
            for y in 0..h {
                for xx in 0..w {
                    for ci in cs..cs + cg {
                        let dxhat = dy[[y, xx, ci]] * self.gamma[ci];
                        dx[[y, xx, ci]] = istd / n
                            * (n * dxhat - sum_dxhat - cache.xhat[[y, xx, ci]] * sum_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grads(&self) -> Self {
        let mut g = self.clone();
        g.gamma.fill(F::zero());
        g.beta.fill(F::zero());
        g
    }
}

// ---------------------------------------------------------------------------
// Cross-attention
// ---------------------------------------------------------------------------

/// Single-head cross-attention from spatial positions to prompt tokens,
/// with a residual connection: y = x + (softmax(QK^T/√C) V) Wo.
#[derive(Debug, Clone)]
pub struct CrossAttention<F> {
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub channels: usize,
    pub token_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCache<F> {
    x2: Array2<F>,
    prompt: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    out_pre: Array2<F>,
    hw: (usize, usize),
}

impl<F: Scalar> CrossAttention<F> {
    pub fn new(rng: &mut ChaCha12Rng, channels: usize, token_dim: usize) -> Self {
        let sc = (1.0 / channels as f64).sqrt();
        let st = (1.0 / token_dim as f64).sqrt();
        CrossAttention {
            wq: randn2(rng, (channels, channels), sc),
            bq: Array1::zeros(channels),
            wk: randn2(rng, (token_dim, channels), st),
            bk: Array1::zeros(channels),
            wv: randn2(rng, (token_dim, channels), st),
            bv: Array1::zeros(channels),
            wo: randn2(rng, (channels, channels), sc * 0.5),
            bo: Array1::zeros(channels),
            channels,
            token_dim,
        }
    }

    pub fn forward(&self, x: &Array3<F>, prompt: &Array2<F>) -> (Array3<F>, CrossAttentionCache<F>) {
        let (h, w, ch) = x.dim();
        debug_assert_eq!(ch, self.channels);
        let x2 = x
            .to_owned()
            .into_shape_with_order((h * w, ch))
            .unwrap();
        let mut q = x2.dot(&self.wq);
        for mut r in q.rows_mut() {
            r += &self.bq;
        }
        let mut k = prompt.dot(&self.wk);
        for mut r in k.rows_mut() {
            r += &self.bk;
        }
        let mut v = prompt.dot(&self.wv);
        for mut r in v.rows_mut() {
            r += &self.bv;
        }
        let scale = c::<F>(1.0 / (ch as f64).sqrt());
        let mut logits = q.dot(&k.t());
        logits.mapv_inplace(|z| z * scale);
        // row softmax
        let mut attn = logits;
        for mut row in attn.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for z in row.iter_mut() {
                *z = (*z - m).exp();
                s = s + *z;
            }
            for z in row.iter_mut() {
                *z = *z / s;
            }
        }
        let out_pre = attn.dot(&v);
        let mut proj = out_pre.dot(&self.wo);
        for mut r in proj.rows_mut() {
            r += &self.bo;
        }
        let y2 = &x2 + &proj;
        let y = y2.into_shape_with_order((h, w, ch)).unwrap();
        (
            y,
            CrossAttentionCache {
                x2,
                prompt: prompt.clone(),
                q,
                k,
                v,
                attn,
                out_pre,
                hw: (h, w),
            },
        )
    }

    /// Returns (dx, dprompt).
    pub fn backward(
        &self,
        cache: &CrossAttentionCache<F>,
        dy: &Array3<F>,
        grads: Option<&mut Self>,
    ) -> (Array3<F>, Array2<F>) {
        let (h, w) = cache.hw;
        let ch = self.channels;
        let dy2 = dy
            .to_owned()
            .into_shape_with_order((h * w, ch))
            .unwrap();
        // residual
        let mut dx2 = dy2.clone();
        let dproj = dy2;
        let dout_pre = std2(dproj.dot(&self.wo.t()));
        let dattn = dout_pre.dot(&cache.v.t());
        let dv = cache.attn.t().dot(&dout_pre);
        // softmax backward: ds = a ⊙ (dattn − rowsum(dattn ⊙ a))
        let mut ds = Array2::<F>::zeros(dattn.dim());
        for (i, row) in cache.attn.rows().into_iter().enumerate() {
            let mut dot = F::zero();
            for (j, &a) in row.iter().enumerate() {
                dot = dot + dattn[[i, j]] * a;
            }
            for (j, &a) in row.iter().enumerate() {
                ds[[i, j]] = a * (dattn[[i, j]] - dot);
            }
        }
        let scale = c::<F>(1.0 / (ch as f64).sqrt());
        ds.mapv_inplace(|z| z * scale);
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);
        if let Some(g) = grads {
            g.wo = &g.wo + &cache.out_pre.t().dot(&dproj);
            g.bo = &g.bo + &dproj.sum_axis(Axis(0));
            g.wq = &g.wq + &cache.x2.t().dot(&dq);
            g.bq = &g.bq + &dq.sum_axis(Axis(0));
            g.wk = &g.wk + &cache.prompt.t().dot(&dk);
            g.bk = &g.bk + &dk.sum_axis(Axis(0));
            g.wv = &g.wv + &cache.prompt.t().dot(&dv);
            g.bv = &g.bv + &dv.sum_axis(Axis(0));
        }
        dx2 = &dx2 + &std2(dq.dot(&self.wq.t()));
        let dprompt = std2(std2(dk.dot(&self.wk.t())) + std2(dv.dot(&self.wv.t())));
        let dx = dx2.into_shape_with_order((h, w, ch)).unwrap();
        (dx, dprompt)
    }

    pub fn zero_grads(&self) -> Self {
        let mut g = self.clone();
        g.wq.fill(F::zero());
        g.bq.fill(F::zero());
        g.wk.fill(F::zero());
        g.bk.fill(F::zero());
        g.wv.fill(F::zero());
        g.bv.fill(F::zero());
        g.wo.fill(F::zero());
        g.bo.fill(F::zero());
        g
    }
}

// ---------------------------------------------------------------------------
// Activations and resampling
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// SiLU applied elementwise; returns (y, cache-of-input).
pub fn silu3<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Array3<F>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, x.clone())
}

pub fn silu3_backward<F: Scalar>(x_cache: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x_cache).for_each(|d, &x| {
        let s = sigmoid(x);
        *d = *d * s * (F::one() + x * (F::one() - s));
    });
    dx
}

pub fn silu1<F: Scalar>(x: &Array1<F>) -> (Array1<F>, Array1<F>) {
    let y = x.mapv(|v| v * sigmoid(v));
    (y, x.clone())
}

pub fn silu1_backward<F: Scalar>(x_cache: &Array1<F>, dy: &Array1<F>) -> Array1<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x_cache).for_each(|d, &x| {
        let s = sigmoid(x);
        *d = *d * s * (F::one() + x * (F::one() - s));
    });
    dx
}

/// ReLU; gradient at exactly zero is zero.
pub fn relu3<F: Scalar>(x: &Array3<F>) -> (Array3<F>, Array3<F>) {
    let y = x.mapv(|v| v.max(F::zero()));
    (y, x.clone())
}

pub fn relu3_backward<F: Scalar>(x_cache: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x_cache).for_each(|d, &x| {
        if x <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (h, w, ch) = x.dim();
    let mut y = Array3::<F>::zeros((h * 2, w * 2, ch));
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..ch {
                let v = x[[iy, ix, ci]];
                y[[2 * iy, 2 * ix, ci]] = v;
                y[[2 * iy + 1, 2 * ix, ci]] = v;
                y[[2 * iy, 2 * ix + 1, ci]] = v;
                y[[2 * iy + 1, 2 * ix + 1, ci]] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Scalar>(dy: &Array3<F>) -> Array3<F> {
    let (h2, w2, ch) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((h, w, ch));
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..ch {
                dx[[iy, ix, ci]] = dy[[2 * iy, 2 * ix, ci]]
                    + dy[[2 * iy + 1, 2 * ix, ci]]
                    + dy[[2 * iy, 2 * ix + 1, ci]]
                    + dy[[2 * iy + 1, 2 * ix + 1, ci]];
            }
        }
    }
    dx
}

/// Global average pool (H, W, C) -> (C).
pub fn global_avg_pool<F: Scalar>(x: &Array3<F>) -> Array1<F> {
    let (h, w, ch) = x.dim();
    let n = c::<F>((h * w) as f64);
    let mut y = Array1::<F>::zeros(ch);
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..ch {
                y[ci] = y[ci] + x[[iy, ix, ci]];
            }
        }
    }
    y.mapv_inplace(|v| v / n);
    y
}

pub fn global_avg_pool_backward<F: Scalar>(
    dy: &Array1<F>,
    h: usize,
    w: usize,
) -> Array3<F> {
    let ch = dy.len();
    let n = c::<F>((h * w) as f64);
    let mut dx = Array3::<F>::zeros((h, w, ch));
    for iy in 0..h {
        for ix in 0..w {
            for ci in 0..ch {
                dx[[iy, ix, ci]] = dy[ci] / n;
            }
        }
    }
    dx
}

/// Concatenate two (H, W, C) tensors along channels.
pub fn concat_channels<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    let (h, w, ca) = a.dim();
    let cb = b.dim().2;
    let mut out = Array3::<F>::zeros((h, w, ca + cb));
    out.slice_mut(ndarray::s![.., .., ..ca]).assign(a);
    out.slice_mut(ndarray::s![.., .., ca..]).assign(b);
    out
}

/// Split a channel gradient back into the two concatenated parts.
pub fn split_channels<F: Scalar>(d: &Array3<F>, ca: usize) -> (Array3<F>, Array3<F>) {
    let a = d.slice(ndarray::s![.., .., ..ca]).to_owned();
    let b = d.slice(ndarray::s![.., .., ca..]).to_owned();
    (a, b)
}

/// Numerically stable log-softmax + cross-entropy; returns (loss, dlogits).
pub fn softmax_cross_entropy<F: Scalar>(logits: &Array1<F>, label: usize) -> (F, Array1<F>) {
    let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut exps = logits.mapv(|z| (z - m).exp());
    let s: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
    let loss = s.ln() + m - logits[label];
    exps.mapv_inplace(|e| e / s);
    exps[label] = exps[label] - F::one();
    (loss, exps)
}

/// Softmax probabilities of a logit vector.
pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut exps = logits.mapv(|z| (z - m).exp());
    let s: F = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
    exps.mapv_inplace(|e| e / s);
    exps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::{Array1, Array2, Array3};

    /// Central-difference check of a scalar-valued function's gradient.
    fn central_diff<FW>(f: FW, x0: &mut [f64], analytic: &[f64], tol: f64)
    where
        FW: Fn(&[f64]) -> f64,
    {
        let h = 1e-5;
        for i in 0..x0.len() {
            let orig = x0[i];
            x0[i] = orig + h;
            let fp = f(x0);
            x0[i] = orig - h;
            let fm = f(x0);
            x0[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "grad mismatch at {i}: fd={fd} analytic={}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = rng_for(1, "conv-test");
        let conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, 1);
        let x = randn3::<f64>(&mut rng, (5, 4, 2), 1.0);
        let target = randn3::<f64>(&mut rng, (5, 4, 3), 1.0);
        // loss = sum(y * target)
        let loss_of = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((5, 4, 2), xs.to_vec()).unwrap();
            let (y, _) = conv.forward(&xa);
            (&y * &target).sum()
        };
        let (y, cache) = conv.forward(&x);
        assert_eq!(y.dim(), (5, 4, 3));
        let mut grads = conv.zero_grads();
        let dx = conv.backward(&cache, &target, Some(&mut grads));
        let mut xv = x.as_slice().unwrap().to_vec();
        let dxv = dx.as_slice().unwrap().to_vec();
        central_diff(loss_of, &mut xv, &dxv, 1e-5);

        // weight gradient check on a few entries
        let mut conv2 = conv.clone();
        let h = 1e-6;
        for &(i, j) in &[(0usize, 0usize), (5, 2), (17, 1)] {
            let orig = conv2.weight[[i, j]];
            conv2.weight[[i, j]] = orig + h;
            let (yp, _) = conv2.forward(&x);
            conv2.weight[[i, j]] = orig - h;
            let (ym, _) = conv2.forward(&x);
            conv2.weight[[i, j]] = orig;
            let fd = ((&yp * &target).sum() - (&ym * &target).sum()) / (2.0 * h);
            assert!((fd - grads.weight[[i, j]]).abs() < 1e-4);
        }
    }

    #[test]
    fn conv2d_stride2_shapes_and_grad() {
        let mut rng = rng_for(2, "conv-s2");
        let conv = Conv2d::<f64>::new(&mut rng, 3, 4, 3, 2);
        let x = randn3::<f64>(&mut rng, (8, 8, 3), 1.0);
        let (y, cache) = conv.forward(&x);
        assert_eq!(y.dim(), (4, 4, 4));
        let dy = randn3::<f64>(&mut rng, (4, 4, 4), 1.0);
        let dx = conv.backward(&cache, &dy, None);
        let loss_of = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((8, 8, 3), xs.to_vec()).unwrap();
            let (y, _) = conv.forward(&xa);
            (&y * &dy).sum()
        };
        let mut xv = x.as_slice().unwrap().to_vec();
        central_diff(loss_of, &mut xv, dx.as_slice().unwrap(), 1e-5);
    }

    #[test]
    fn groupnorm_gradients_match_finite_differences() {
        let mut rng = rng_for(3, "gn");
        let mut gn = GroupNorm::<f64>::new(4, 2);
        // non-trivial gamma/beta
        gn.gamma = Array1::from_vec(vec![1.3, 0.7, -0.5, 2.0]);
        gn.beta = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let x = randn3::<f64>(&mut rng, (3, 3, 4), 1.0);
        let w = randn3::<f64>(&mut rng, (3, 3, 4), 1.0);
        let loss_of = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((3, 3, 4), xs.to_vec()).unwrap();
            let (y, _) = gn.forward(&xa);
            (&y * &w).sum()
        };
        let (_, cache) = gn.forward(&x);
        let mut grads = gn.zero_grads();
        let dx = gn.backward(&cache, &w, Some(&mut grads));
        let mut xv = x.as_slice().unwrap().to_vec();
        central_diff(loss_of, &mut xv, dx.as_slice().unwrap(), 1e-4);
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut rng = rng_for(4, "attn");
        let attn = CrossAttention::<f64>::new(&mut rng, 4, 6);
        let x = randn3::<f64>(&mut rng, (3, 2, 4), 1.0);
        let p = randn2::<f64>(&mut rng, (5, 6), 1.0);
        let w = randn3::<f64>(&mut rng, (3, 2, 4), 1.0);
        let (_, cache) = attn.forward(&x, &p);
        let (dx, dp) = attn.backward(&cache, &w, None);
        let loss_x = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((3, 2, 4), xs.to_vec()).unwrap();
            let (y, _) = attn.forward(&xa, &p);
            (&y * &w).sum()
        };
        let mut xv = x.as_slice().unwrap().to_vec();
        central_diff(loss_x, &mut xv, dx.as_slice().unwrap(), 1e-4);
        let loss_p = |ps: &[f64]| {
            let pa = Array2::from_shape_vec((5, 6), ps.to_vec()).unwrap();
            let (y, _) = attn.forward(&x, &pa);
            (&y * &w).sum()
        };
        let mut pv = p.as_slice().unwrap().to_vec();
        central_diff(loss_p, &mut pv, dp.as_slice().unwrap(), 1e-4);
    }

    #[test]
    fn attention_zero_prompt_gives_uniform_rows() {
        let mut rng = rng_for(5, "attn-zero");
        let attn = CrossAttention::<f64>::new(&mut rng, 4, 6);
        let x = randn3::<f64>(&mut rng, (2, 2, 4), 1.0);
        let p = Array2::<f64>::zeros((3, 6));
        let (_, cache) = attn.forward(&x, &p);
        for row in cache.attn.rows() {
            for &a in row.iter() {
                assert!((a - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silu_and_upsample_backward() {
        let mut rng = rng_for(6, "misc");
        let x = randn3::<f64>(&mut rng, (3, 3, 2), 1.0);
        let w = randn3::<f64>(&mut rng, (3, 3, 2), 1.0);
        let (_, cache) = silu3(&x);
        let dx = silu3_backward(&cache, &w);
        let loss_of = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((3, 3, 2), xs.to_vec()).unwrap();
            let (y, _) = silu3(&xa);
            (&y * &w).sum()
        };
        let mut xv = x.as_slice().unwrap().to_vec();
        central_diff(loss_of, &mut xv, dx.as_slice().unwrap(), 1e-5);

        let up = upsample2(&x);
        assert_eq!(up.dim(), (6, 6, 2));
        assert_eq!(up[[1, 1, 0]], x[[0, 0, 0]]);
        let w2 = randn3::<f64>(&mut rng, (6, 6, 2), 1.0);
        let dxu = upsample2_backward(&w2);
        let loss_up = |xs: &[f64]| {
            let xa = Array3::from_shape_vec((3, 3, 2), xs.to_vec()).unwrap();
            (&upsample2(&xa) * &w2).sum()
        };
        let mut xv2 = x.as_slice().unwrap().to_vec();
        central_diff(loss_up, &mut xv2, dxu.as_slice().unwrap(), 1e-5);
    }

    #[test]
    fn softmax_ce_matches_probabilities() {
        let logits = Array1::from_vec(vec![2.0f64, -1.0, 0.5]);
        let (loss, dlogits) = softmax_cross_entropy(&logits, 0);
        let p = softmax(&logits);
        assert!((loss - (-p[0].ln())).abs() < 1e-12);
        assert!((dlogits[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((dlogits[1] - p[1]).abs() < 1e-12);
        assert!(((p.sum()) - 1.0).abs() < 1e-12);
    }
}
