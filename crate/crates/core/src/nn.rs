//! Layer primitives with hand-written backward passes.
//!
//! Every convolution in the model uses a 4×4 kernel, stride 2 and padding 1,
//! so the forward convolution halves the spatial size and the transposed
//! convolution doubles it. Activations are [`FeatureMap`]s in `[C, N, H, W]`
//! layout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{matmul, FeatureMap, Real, Tensor, Trans};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
const TAPS: usize = KERNEL * KERNEL;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Unfolds the 4×4/s2/p1 receptive fields of `x` into a `[C·16, N·(H/2)·(W/2)]` matrix.
pub fn im2col<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let (ho, wo) = (x.h / STRIDE, x.w / STRIDE);
    let cols_n = x.n * ho * wo;
    let mut cols = vec![T::zero(); x.c * TAPS * cols_n];
    let plane = x.plane();
    for c in 0..x.c {
        let src = &x.data[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(c * TAPS + ky * KERNEL + kx) * cols_n..][..cols_n];
                for b in 0..x.n {
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[(b * x.h + iy as usize) * x.w..][..x.w];
                        let dst = &mut row[(b * ho + oy) * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a `[C·16, N·(H/2)·(W/2)]` matrix back onto a `[C, N, H, W]` map.
pub fn col2im<T: Real>(cols: &[T], c: usize, n: usize, h: usize, w: usize) -> FeatureMap<T> {
    let (ho, wo) = (h / STRIDE, w / STRIDE);
    let cols_n = n * ho * wo;
    debug_assert_eq!(cols.len(), c * TAPS * cols_n);
    let mut out = FeatureMap::zeros(c, n, h, w);
    let plane = out.plane();
    for ch in 0..c {
        let dst = &mut out.data[ch * plane..(ch + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ch * TAPS + ky * KERNEL + kx) * cols_n..][..cols_n];
                for b in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[(b * h + iy as usize) * w..][..w];
                        let src = &row[(b * ho + oy) * wo..][..wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strided convolution. `weight` is `[cout, cin, 4, 4]`. Returns the output and the unfolded input.
pub fn conv_forward<T: Real>(x: &FeatureMap<T>, weight: &[T], cout: usize) -> (FeatureMap<T>, Vec<T>) {
    let cols = im2col(x);
    let mut y = FeatureMap::zeros(cout, x.n, x.h / STRIDE, x.w / STRIDE);
    let k = x.c * TAPS;
    let n = y.plane();
    matmul(cout, k, n, weight, Trans::N, &cols, Trans::N, T::zero(), &mut y.data);
    (y, cols)
}

/// Returns `(d weight, d input)`; the input gradient is skipped when `input_dims` is `None`.
pub fn conv_backward<T: Real>(
    dy: &FeatureMap<T>,
    cols: &[T],
    weight: &[T],
    cin: usize,
    input_dims: Option<(usize, usize)>,
) -> (Vec<T>, Option<FeatureMap<T>>) {
    let k = cin * TAPS;
    let n = dy.plane();
    let mut dw = vec![T::zero(); dy.c * k];
    matmul(dy.c, n, k, &dy.data, Trans::N, cols, Trans::T, T::zero(), &mut dw);
    let dx = input_dims.map(|(h, w)| {
        let mut dcols = vec![T::zero(); k * n];
        matmul(k, dy.c, n, weight, Trans::T, &dy.data, Trans::N, T::zero(), &mut dcols);
        col2im(&dcols, cin, dy.n, h, w)
    });
    (dw, dx)
}

/// Transposed convolution doubling spatial size. `weight` is `[cin, cout, 4, 4]`.
pub fn conv_t_forward<T: Real>(x: &FeatureMap<T>, weight: &[T], cout: usize) -> FeatureMap<T> {
    let m = cout * TAPS;
    let n = x.plane();
    let mut cols = vec![T::zero(); m * n];
    matmul(m, x.c, n, weight, Trans::T, &x.data, Trans::N, T::zero(), &mut cols);
    col2im(&cols, cout, x.n, x.h * STRIDE, x.w * STRIDE)
}

pub fn conv_t_backward<T: Real>(
    dy: &FeatureMap<T>,
    x: &FeatureMap<T>,
    weight: &[T],
    want_dx: bool,
) -> (Vec<T>, Option<FeatureMap<T>>) {
    let dcols = im2col(dy);
    let m = dy.c * TAPS;
    let n = x.plane();
    let mut dw = vec![T::zero(); x.c * m];
    matmul(x.c, n, m, &x.data, Trans::N, &dcols, Trans::T, T::zero(), &mut dw);
    let dx = want_dx.then(|| {
        let mut dx = FeatureMap::zeros(x.c, x.n, x.h, x.w);
        matmul(x.c, m, n, weight, Trans::N, &dcols, Trans::N, T::zero(), &mut dx.data);
        dx
    });
    (dw, dx)
}

pub fn add_channel_bias<T: Real>(y: &mut FeatureMap<T>, bias: &[T]) {
    let plane = y.plane();
    for (chunk, &b) in y.data.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

pub fn channel_sums<T: Real>(dy: &FeatureMap<T>) -> Vec<T> {
    dy.data.chunks(dy.plane()).map(|c| c.iter().copied().sum()).collect()
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub batch_var: Vec<T>,
}

pub fn batch_norm_train<T: Real>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
) -> (FeatureMap<T>, BatchNormCache<T>) {
    let plane = x.plane();
    let count = T::from_usize(plane).unwrap();
    let eps = T::lit(BN_EPS);
    let mut y = x.clone();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.c);
    let mut batch_mean = Vec::with_capacity(x.c);
    let mut batch_var = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let src = &x.data[c * plane..(c + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let istd = T::one() / (var + eps).sqrt();
        let xh = &mut xhat[c * plane..(c + 1) * plane];
        let out = &mut y.data[c * plane..(c + 1) * plane];
        for ((o, h), &v) in out.iter_mut().zip(xh.iter_mut()).zip(src) {
            *h = (v - mean) * istd;
            *o = gamma[c] * *h + beta[c];
        }
        inv_std.push(istd);
        batch_mean.push(mean);
        let unbiased = if plane > 1 {
            var * count / (count - T::one())
        } else {
            var
        };
        batch_var.push(unbiased);
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

pub fn batch_norm_eval<T: Real>(
    x: &FeatureMap<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> FeatureMap<T> {
    let plane = x.plane();
    let eps = T::lit(BN_EPS);
    let mut y = x.clone();
    for c in 0..x.c {
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        y.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = *v * scale + shift);
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    dy: &FeatureMap<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
    let plane = dy.plane();
    let count = T::from_usize(plane).unwrap();
    let mut dx = dy.clone();
    let mut dgamma = Vec::with_capacity(dy.c);
    let mut dbeta = Vec::with_capacity(dy.c);
    for c in 0..dy.c {
        let g = &dy.data[c * plane..(c + 1) * plane];
        let xh = &cache.xhat[c * plane..(c + 1) * plane];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dgamma.push(sum_gx);
        dbeta.push(sum_g);
        let k = gamma[c] * cache.inv_std[c] / count;
        for ((d, &gi), &xi) in dx.data[c * plane..(c + 1) * plane].iter_mut().zip(g).zip(xh) {
            *d = k * (count * gi - sum_g - xi * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn update_running<T: Real>(running: &mut [T], batch: &[T]) {
    let m = T::lit(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, data: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                data.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = *v * s
                    }
                })
            }
            Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` in place by the derivative, given the activation's output.
    pub fn backward<T: Real>(self, output: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.iter_mut().zip(output).for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = T::zero()
                }
            }),
            Activation::LeakyRelu(slope) => {
                let s = T::lit(slope);
                grad.iter_mut().zip(output).for_each(|(g, &y)| {
                    if y < T::zero() {
                        *g = *g * s
                    }
                })
            }
            Activation::Tanh => grad
                .iter_mut()
                .zip(output)
                .for_each(|(g, &y)| *g = *g * (T::one() - y * y)),
        }
    }
}

/// `[C, N, H, W]` → `[C·H·W, N]` (one column per sample).
pub fn flatten<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let hw = x.h * x.w;
    if hw == 1 {
        return x.data.clone();
    }
    let mut out = vec![T::zero(); x.data.len()];
    for c in 0..x.c {
        for b in 0..x.n {
            for p in 0..hw {
                out[(c * hw + p) * x.n + b] = x.data[(c * x.n + b) * hw + p];
            }
        }
    }
    out
}

pub fn unflatten<T: Real>(m: &[T], c: usize, n: usize, h: usize, w: usize) -> FeatureMap<T> {
    let hw = h * w;
    let mut out = FeatureMap::zeros(c, n, h, w);
    if hw == 1 {
        out.data.copy_from_slice(m);
        return out;
    }
    for ch in 0..c {
        for b in 0..n {
            for p in 0..hw {
                out.data[(ch * n + b) * hw + p] = m[(ch * hw + p) * n + b];
            }
        }
    }
    out
}

/// `y [out, N] = W [out, in] · x [in, N] + b`.
pub fn linear_forward<T: Real>(x: &[T], n: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let out = bias.len();
    let fin = x.len() / n;
    let mut y = vec![T::zero(); out * n];
    for (row, &b) in y.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v = b);
    }
    matmul(out, fin, n, weight, Trans::N, x, Trans::N, T::one(), &mut y);
    y
}

/// Returns `(dW, db, dx)`.
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    n: usize,
    weight: &[T],
    want_dx: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let out = dy.len() / n;
    let fin = x.len() / n;
    let mut dw = vec![T::zero(); out * fin];
    matmul(out, n, fin, dy, Trans::N, x, Trans::T, T::zero(), &mut dw);
    let db = dy.chunks(n).map(|r| r.iter().copied().sum()).collect();
    let dx = want_dx.then(|| {
        let mut dx = vec![T::zero(); fin * n];
        matmul(fin, out, n, weight, Trans::T, dy, Trans::N, T::zero(), &mut dx);
        dx
    });
    (dw, db, dx)
}

/// Inverted dropout mask: each entry is `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Zero-mean normal init with standard deviation `gain / sqrt(fan_in)`.
pub fn normal_init<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let std = gain / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Gain for a rectifier with the given negative slope.
pub fn rectifier_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}
