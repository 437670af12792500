//! Differentiable training objectives.

use segsr_autograd::{Tensor, Var};

use crate::metrics::{gaussian_window, SsimParams};

/// Weight of the `1 − SSIM` term in the L1 + SSIM objective.
pub const SSIM_WEIGHT: f64 = 0.1;

/// Smoothing added to both sides of the soft Jaccard ratio.
pub const JACCARD_EPS: f64 = 1e-6;

pub fn l1<'t>(pred: Var<'t>, target: Var<'t>) -> Var<'t> {
    (pred - target).abs().mean_all()
}

/// Mean SSIM over valid Gaussian windows of (N, C, H, W) batches, matching
/// [`crate::metrics::ssim`] per image.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>, p: &SsimParams) -> Var<'t> {
    let (_, _, h, w) = a.dims4();
    let g = gaussian_window(p.effective_window(h, w), p.sigma);
    let (rows, cols) = (valid_filter(h, &g), valid_filter(w, &g));
    let blur = |x: Var<'t>| x.resample(&rows, &cols);
    let (mu_a, mu_b) = (blur(a), blur(b));
    let (mu_aa, mu_bb, mu_ab) = (mu_a * mu_a, mu_b * mu_b, mu_a * mu_b);
    let var_a = blur(a * a) - mu_aa;
    let var_b = blur(b * b) - mu_bb;
    let cov = blur(a * b) - mu_ab;
    let num = mu_ab.mul_scalar(2.0).add_scalar(p.c1()) * cov.mul_scalar(2.0).add_scalar(p.c2());
    let den = (mu_aa + mu_bb).add_scalar(p.c1()) * (var_a + var_b).add_scalar(p.c2());
    (num / den).mean_all()
}

/// Banded (len − k + 1, len) matrix applying the taps `g` at every valid offset.
fn valid_filter(len: usize, g: &[f64]) -> Tensor {
    let out = len - g.len() + 1;
    Tensor::from_fn([out, len], |i| {
        let d = i[1].wrapping_sub(i[0]);
        if d < g.len() {
            g[d]
        } else {
            0.0
        }
    })
}

/// L1, optionally plus `0.1 · (1 − SSIM)`.
pub fn sr_loss<'t>(pred: Var<'t>, target: Var<'t>, with_ssim: bool) -> Var<'t> {
    let base = l1(pred, target);
    if with_ssim {
        base + ssim(pred, target, &SsimParams::default()).neg().add_scalar(1.0).mul_scalar(SSIM_WEIGHT)
    } else {
        base
    }
}

/// Pixel-mean cross-entropy plus `1 − soft Jaccard` (mean over classes) for
/// (N, K, H, W) logits and one-hot targets of the same shape.
pub fn seg_loss<'t>(logits: Var<'t>, one_hot: Var<'t>) -> Var<'t> {
    let (n, k, h, w) = logits.dims4();
    let ce = (logits.log_softmax(1) * one_hot).sum_all().mul_scalar(-1.0 / (n * h * w) as f64);
    let prob = logits.softmax(1);
    let inter = (prob * one_hot).sum_axes(&[0, 2, 3]);
    let total = (prob + one_hot).sum_axes(&[0, 2, 3]);
    let jaccard = inter.add_scalar(JACCARD_EPS) / (total - inter).add_scalar(JACCARD_EPS);
    ce + jaccard.sum_all().mul_scalar(-1.0 / k as f64).add_scalar(1.0)
}
