//! 2-D convolution and transposed convolution over NCHW tensors (im2col + GEMM).

use crate::ops::linalg::{gemm, Mat};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Square-kernel convolution geometry shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvGeom {
    /// Stride 1 with padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self { stride, padding, dilation: 1 }
    }

    /// Output length of a convolution over `input` positions.
    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        assert!(padded >= span, "kernel span {span} exceeds padded input {padded}");
        (padded - span) / self.stride + 1
    }

    /// Output length of the transposed convolution with `output_padding`.
    pub fn transposed_out_len(&self, input: usize, kernel: usize, output_padding: usize) -> usize {
        ((input - 1) * self.stride + self.dilation * (kernel - 1) + output_padding + 1)
            .checked_sub(2 * self.padding)
            .expect("transposed convolution padding too large")
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Plane geometry for im2col/col2im.
#[derive(Clone, Copy)]
struct Plane {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Plane {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Signed input offset of kernel tap `t`, and the output positions
    /// `lo..hi` whose input coordinate `o * stride + offset` lies in `0..len`.
    #[inline]
    fn span(&self, t: usize, len: usize, out_len: usize) -> (isize, usize, usize) {
        let s = self.geom.stride as isize;
        let off = (t * self.geom.dilation) as isize - self.geom.padding as isize;
        let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
        let hi = if len as isize - off <= 0 { 0 } else { (len as isize - off + s - 1) / s };
        let hi = (hi as usize).min(out_len);
        (off, (lo as usize).min(hi), hi)
    }
}

fn im2col(x: &[f64], p: Plane, cols: &mut [f64]) {
    let l = p.cols();
    let stride = p.geom.stride;
    for c in 0..p.channels {
        let plane = &x[c * p.h * p.w..][..p.h * p.w];
        for ki in 0..p.k {
            let (yoff, ylo, yhi) = p.span(ki, p.h, p.oh);
            for kj in 0..p.k {
                let (xoff, xlo, xhi) = p.span(kj, p.w, p.ow);
                let row = &mut cols[((c * p.k + ki) * p.k + kj) * l..][..l];
                row[..ylo * p.ow].fill(0.0);
                row[yhi * p.ow..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = (oy * stride) as isize + yoff;
                    let src = &plane[iy as usize * p.w..][..p.w];
                    let dst = &mut row[oy * p.ow..][..p.ow];
                    dst[..xlo].fill(0.0);
                    dst[xhi..].fill(0.0);
                    if xlo == xhi {
                        continue;
                    }
                    let first = (xlo * stride) as isize + xoff;
                    if stride == 1 {
                        dst[xlo..xhi].copy_from_slice(&src[first as usize..][..xhi - xlo]);
                    } else {
                        for (i, d) in dst[xlo..xhi].iter_mut().enumerate() {
                            *d = src[first as usize + i * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the plane `x`.
fn col2im(cols: &[f64], p: Plane, x: &mut [f64]) {
    let l = p.cols();
    let stride = p.geom.stride;
    for c in 0..p.channels {
        let plane = &mut x[c * p.h * p.w..][..p.h * p.w];
        for ki in 0..p.k {
            let (yoff, ylo, yhi) = p.span(ki, p.h, p.oh);
            for kj in 0..p.k {
                let (xoff, xlo, xhi) = p.span(kj, p.w, p.ow);
                let row = &cols[((c * p.k + ki) * p.k + kj) * l..][..l];
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = (oy * stride) as isize + yoff;
                    let dst = &mut plane[iy as usize * p.w..][..p.w];
                    let src = &row[oy * p.ow + xlo..oy * p.ow + xhi];
                    let first = ((xlo * stride) as isize + xoff) as usize;
                    if stride == 1 {
                        for (d, v) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in src.iter().enumerate() {
                            dst[first + i * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize, plane: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut out[(b * c + ch) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad(g: &[f64], n: usize, c: usize, plane: usize) -> Tensor {
    let mut gb = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::new([c], gb)
}

impl<'t> Var<'t> {
    /// Convolution of `self` (N, Cin, H, W) with `weight` (Cout, Cin, k, k) plus optional bias (Cout).
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (n, cin, h, wd) = x.dims4();
        let (cout, wcin, k, k2) = w.dims4();
        assert!(k == k2, "conv2d expects a square kernel, got {k}x{k2}");
        assert_eq!(cin, wcin, "conv2d input has {cin} channels, weight expects {wcin}");
        let p = Plane { channels: cin, h, w: wd, k, oh: geom.out_len(h, k), ow: geom.out_len(wd, k), geom };
        let (rows, l) = (p.rows(), p.cols());
        let pointwise = geom.is_pointwise(k);
        let wm = Mat::row_major(w.data(), cout, rows);
        let mut out = vec![0.0; n * cout * l];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * l] };
        for b in 0..n {
            let xb = &x.data()[b * cin * h * wd..][..cin * h * wd];
            let cm = if pointwise {
                Mat::row_major(xb, rows, l)
            } else {
                im2col(xb, p, &mut cols);
                Mat::row_major(&cols, rows, l)
            };
            gemm(wm, cm, &mut out[b * cout * l..], 0.0);
        }
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            let bt = bv.value();
            assert_eq!(bt.shape(), &[cout], "conv2d bias must have shape [{cout}]");
            add_bias(&mut out, bt.data(), n, l);
            inputs.push(bv);
        }
        let value = Tensor::new([n, cout, p.oh, p.ow], out);
        let has_bias = bias.is_some();
        self.tape.op(value, &inputs, move |ctx| {
            let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let wm = Mat::row_major(w, cout, rows);
            let mut gx = vec![0.0; n * cin * h * wd];
            let mut gw = vec![0.0; cout * rows];
            let mut cols = vec![0.0; rows * l];
            for b in 0..n {
                let xb = &x[b * cin * h * wd..][..cin * h * wd];
                let gm = Mat::row_major(&g[b * cout * l..], cout, l);
                if pointwise {
                    gemm(gm, Mat::row_major(xb, rows, l).t(), &mut gw, 1.0);
                    gemm(wm.t(), gm, &mut gx[b * cin * h * wd..], 0.0);
                } else {
                    im2col(xb, p, &mut cols);
                    gemm(gm, Mat::row_major(&cols, rows, l).t(), &mut gw, 1.0);
                    gemm(wm.t(), gm, &mut cols, 0.0);
                    col2im(&cols, p, &mut gx[b * cin * h * wd..]);
                }
            }
            let mut grads = vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gw)),
            ];
            if has_bias {
                grads.push(Some(bias_grad(g, n, cout, l)));
            }
            grads
        })
    }

    /// Transposed convolution of `self` (N, Cin, H, W) with `weight` (Cin, Cout, k, k).
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geom: ConvGeom,
        output_padding: usize,
    ) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let (n, cin, h, wd) = x.dims4();
        let (wcin, cout, k, k2) = w.dims4();
        assert!(k == k2, "conv_transpose2d expects a square kernel");
        assert_eq!(cin, wcin, "conv_transpose2d input has {cin} channels, weight expects {wcin}");
        assert!(output_padding < geom.stride.max(geom.dilation), "output_padding too large");
        let oh = geom.transposed_out_len(h, k, output_padding);
        let ow = geom.transposed_out_len(wd, k, output_padding);
        // The equivalent forward convolution maps (oh, ow) -> (h, w).
        let p = Plane { channels: cout, h: oh, w: ow, k, oh: h, ow: wd, geom };
        debug_assert_eq!(geom.out_len(oh, k), h);
        let (rows, l) = (p.rows(), p.cols());
        let wm = Mat::row_major(w.data(), cin, rows);
        let mut out = vec![0.0; n * cout * oh * ow];
        let mut cols = vec![0.0; rows * l];
        for b in 0..n {
            let xm = Mat::row_major(&x.data()[b * cin * l..], cin, l);
            gemm(wm.t(), xm, &mut cols, 0.0);
            col2im(&cols, p, &mut out[b * cout * oh * ow..]);
        }
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            let bt = bv.value();
            assert_eq!(bt.shape(), &[cout], "conv_transpose2d bias must have shape [{cout}]");
            add_bias(&mut out, bt.data(), n, oh * ow);
            inputs.push(bv);
        }
        let has_bias = bias.is_some();
        let value = Tensor::new([n, cout, oh, ow], out);
        self.tape.op(value, &inputs, move |ctx| {
            let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let wm = Mat::row_major(w, cin, rows);
            let mut gx = vec![0.0; n * cin * l];
            let mut gw = vec![0.0; cin * rows];
            let mut cols = vec![0.0; rows * l];
            for b in 0..n {
                im2col(&g[b * cout * oh * ow..][..cout * oh * ow], p, &mut cols);
                let cm = Mat::row_major(&cols, rows, l);
                gemm(wm, cm, &mut gx[b * cin * l..], 0.0);
                gemm(Mat::row_major(&x[b * cin * l..], cin, l), cm.t(), &mut gw, 1.0);
            }
            let mut grads = vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), gx)),
                Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gw)),
            ];
            if has_bias {
                grads.push(Some(bias_grad(g, n, cout, oh * ow)));
            }
            grads
        })
    }
}
