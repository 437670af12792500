//! Interpolation weight matrices for separable resampling.
//!
//! Each builder returns an `(out_len, in_len)` matrix `M` such that a 1-D
//! signal `x` resamples to `M · x`; images apply one matrix per axis via
//! [`Var::resample`](segsr_autograd::Var::resample).

use segsr_autograd::{Tape, Tensor};

/// Cubic convolution coefficient used for bicubic resampling.
pub const BICUBIC_A: f64 = -0.5;

/// Keys' cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic weights. When downscaling with `antialias`, the kernel is stretched
/// by the scale factor so it also low-pass filters. Taps falling outside the
/// signal are dropped and the remaining weights renormalized to sum to one.
pub fn bicubic_weights(in_len: usize, out_len: usize, antialias: bool) -> Tensor {
    let scale = in_len as f64 / out_len as f64;
    let stretch = if antialias { scale.max(1.0) } else { 1.0 };
    let support = 2.0 * stretch;
    let mut m = Tensor::zeros([out_len, in_len]);
    for i in 0..out_len {
        let center = (i as f64 + 0.5) * scale;
        let lo = (center - support).floor().max(0.0) as usize;
        let hi = ((center + support).ceil() as usize).min(in_len);
        let taps: Vec<(usize, f64)> =
            (lo..hi).map(|j| (j, cubic_kernel((j as f64 + 0.5 - center) / stretch, BICUBIC_A))).collect();
        let total: f64 = taps.iter().map(|t| t.1).sum();
        for (j, w) in taps {
            m.data_mut()[i * in_len + j] = w / total;
        }
    }
    m
}

/// Bilinear weights with half-pixel centers (sample positions clamped at the
/// borders); no antialiasing.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Tensor {
    let scale = in_len as f64 / out_len as f64;
    let mut m = Tensor::zeros([out_len, in_len]);
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let j0 = (src.floor() as usize).min(in_len - 1);
        let j1 = (j0 + 1).min(in_len - 1);
        let frac = src - j0 as f64;
        m.data_mut()[i * in_len + j0] += 1.0 - frac;
        m.data_mut()[i * in_len + j1] += frac;
    }
    m
}

/// Adaptive average pooling bins: bin `i` averages `[floor(i·n/k), ceil((i+1)·n/k))`.
pub fn adaptive_avg_weights(in_len: usize, out_len: usize) -> Tensor {
    let mut m = Tensor::zeros([out_len, in_len]);
    for i in 0..out_len {
        let start = i * in_len / out_len;
        let end = ((i + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m.data_mut()[i * in_len + j] = w;
        }
    }
    m
}

/// Applies separable weights to the last two axes of a plain tensor.
pub fn apply_separable(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Tensor {
    let tape = Tape::inference();
    tape.constant(x.clone()).resample(rows, cols).value().as_ref().clone()
}

/// Bicubic resize of the last two axes to `(out_h, out_w)`.
pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize, antialias: bool) -> Tensor {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    apply_separable(x, &bicubic_weights(h, out_h, antialias), &bicubic_weights(w, out_w, antialias))
}
