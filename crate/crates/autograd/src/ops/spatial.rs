//! Spatial rearrangements: max pooling, separable linear resampling, pixel shuffle.

use crate::ops::linalg::{gemm, Mat};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Pixel-shuffle index map: `out(c, s*h + a, s*w + b) = in(c*s*s + a*s + b, h, w)`.
pub fn pixel_shuffle_tensor(x: &Tensor, s: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    assert!(s >= 1 && cin % (s * s) == 0, "pixel_shuffle: {cin} channels not divisible by {}", s * s);
    let c = cin / (s * s);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..s {
                for bb in 0..s {
                    let src_c = ch * s * s + a * s + bb;
                    for y in 0..h {
                        let src = &d[((b * cin + src_c) * h + y) * w..][..w];
                        let row = ((b * c + ch) * h * s + y * s + a) * w * s;
                        for (xx, &v) in src.iter().enumerate() {
                            out[row + xx * s + bb] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c, h * s, w * s], out)
}

/// Inverse of [`pixel_shuffle_tensor`].
pub fn pixel_unshuffle_tensor(x: &Tensor, s: usize) -> Tensor {
    let (n, c, hs, ws) = x.dims4();
    assert!(s >= 1 && hs % s == 0 && ws % s == 0, "pixel_unshuffle: spatial dims not divisible by {s}");
    let (h, w) = (hs / s, ws / s);
    let cout = c * s * s;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..s {
                for bb in 0..s {
                    let dst_c = ch * s * s + a * s + bb;
                    for y in 0..h {
                        let dst = ((b * cout + dst_c) * h + y) * w;
                        let row = ((b * c + ch) * hs + y * s + a) * ws;
                        for xx in 0..w {
                            out[dst + xx] = d[row + xx * s + bb];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, cout, h, w], out)
}

impl<'t> Var<'t> {
    /// Max pooling with a square window; padding acts as `-inf`.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(padding < kernel, "max_pool2d padding must be smaller than the kernel");
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let d = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &d[plane * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + best_i;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape.op(Tensor::new([n, c, oh, ow], out), &[self], move |ctx| {
            let mut gi = vec![0.0; in_shape.iter().product()];
            for (o, &g) in ctx.grad.data().iter().enumerate() {
                gi[arg[o]] += g;
            }
            vec![Some(Tensor::new(in_shape.clone(), gi))]
        })
    }

    /// Separable linear map over the last two axes: each (H, W) plane `X`
    /// becomes `rows · X · colsᵀ`, with `rows` (H', H) and `cols` (W', W).
    ///
    /// Covers bilinear/bicubic resizing and adaptive average pooling, whose
    /// weights are fixed matrices.
    pub fn resample(self, rows: &Tensor, cols: &Tensor) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(shape.len() >= 2, "resample needs at least two axes");
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (oh, rh) = (rows.shape()[0], rows.shape()[1]);
        let (ow, cw) = (cols.shape()[0], cols.shape()[1]);
        assert!(rows.rank() == 2 && cols.rank() == 2, "resample weights must be matrices");
        assert!(
            rh == h && cw == w,
            "resample weights {:?}/{:?} do not match plane {h}x{w}",
            rows.shape(),
            cols.shape()
        );
        let planes = x.numel() / (h * w);
        let mut out = vec![0.0; planes * oh * ow];
        let mut tmp = vec![0.0; h * ow];
        let (rm, cm) = (rows.data().to_vec(), cols.data().to_vec());
        for p in 0..planes {
            gemm(Mat::row_major(&x.data()[p * h * w..], h, w), Mat::row_major(&cm, ow, w).t(), &mut tmp, 0.0);
            gemm(Mat::row_major(&rm, oh, h), Mat::row_major(&tmp, h, ow), &mut out[p * oh * ow..], 0.0);
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.tape.op(Tensor::new(out_shape, out), &[self], move |ctx| {
            let g = ctx.grad.data();
            let mut gi = vec![0.0; planes * h * w];
            let mut tmp = vec![0.0; h * ow];
            for p in 0..planes {
                gemm(Mat::row_major(&rm, oh, h).t(), Mat::row_major(&g[p * oh * ow..], oh, ow), &mut tmp, 0.0);
                gemm(Mat::row_major(&tmp, h, ow), Mat::row_major(&cm, ow, w), &mut gi[p * h * w..], 0.0);
            }
            vec![Some(Tensor::new(shape.clone(), gi))]
        })
    }

    pub fn pixel_shuffle(self, s: usize) -> Var<'t> {
        let value = pixel_shuffle_tensor(&self.value(), s);
        self.tape.op(value, &[self], move |ctx| vec![Some(pixel_unshuffle_tensor(ctx.grad, s))])
    }

    pub fn pixel_unshuffle(self, s: usize) -> Var<'t> {
        let value = pixel_unshuffle_tensor(&self.value(), s);
        self.tape.op(value, &[self], move |ctx| vec![Some(pixel_shuffle_tensor(ctx.grad, s))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn shuffle_four_channels_into_block() {
        let x = Tensor::new([1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let y = pixel_shuffle_tensor(&x, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| (i[2] * 4 + i[3]) as f64);
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let y = xv.max_pool2d(3, 2, 1);
        assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
        let grads = tape.backward(y.sum_all());
        let gx = grads.get(xv).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| gx.data()[i] != 0.0).collect();
        assert_eq!(hot, vec![5, 7, 13, 15]);
    }

    #[test]
    fn resample_identity_is_noop() {
        let eye = |n: usize| Tensor::from_fn([n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let x = Tensor::from_fn([2, 3, 4, 5], |i| (i[0] + 2 * i[1] + 3 * i[2] + 5 * i[3]) as f64);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).resample(&eye(4), &eye(5));
        assert_eq!(*y.value(), x);
    }
}
