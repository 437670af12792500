//! Reductions, reshaping, axis permutation, concatenation and softmax.

use crate::ops::elementwise::{broadcast_binary, reduce_to_shape};
use crate::tape::Var;
use crate::tensor::Tensor;

fn expand_to(g: &Tensor, shape: &[usize]) -> Tensor {
    broadcast_binary(&Tensor::zeros(shape.to_vec()), g, |_, y| y)
}

/// `(outer, n, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<'t> Var<'t> {
    /// Sum of all entries as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape
            .op(Tensor::scalar(v.sum()), &[self], move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.item()))])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            assert!(a < in_shape.len(), "sum axis {a} out of range");
            out_shape[a] = 1;
        }
        let value = reduce_to_shape(&v, &out_shape);
        self.tape.op(value, &[self], move |ctx| vec![Some(expand_to(ctx.grad, &in_shape))])
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    /// Maximum along `axis` (kept as size 1). Ties route the gradient to the first maximum.
    pub fn max_axis(self, axis: usize) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for k in 0..n {
                    let x = d[(o * n + k) * inner + i];
                    if x > best {
                        best = x;
                        best_k = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_k;
            }
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        self.tape.op(Tensor::new(out_shape, out), &[self], move |ctx| {
            let g = ctx.grad.data();
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    gi[(o * n + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gi))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let value = v.as_ref().clone().reshape(shape.to_vec());
        self.tape.op(value, &[self], move |ctx| vec![Some(ctx.grad.clone().reshape(in_shape.clone()))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let value = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.op(value, &[self], move |ctx| vec![Some(ctx.grad.permute(&inverse))])
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Var<'t> {
        let mut axes: Vec<usize> = (0..self.value().rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let value = v.narrow(axis, start, len);
        let in_shape = v.shape().to_vec();
        self.tape.op(value, &[self], move |ctx| {
            let (outer, n, inner) = split_axis(&in_shape, axis);
            let g = ctx.grad.data();
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), gi))]
        })
    }

    /// Concatenates along `axis`. All vars must share a tape.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero vars");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].tape.op(value, parts, move |ctx| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let g = ctx.grad.narrow(axis, start, len);
                    start += len;
                    Some(g)
                })
                .collect()
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let v = self.value();
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out);
        self.tape.op(value, &[self], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gi[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), gi))]
        })
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(self, axis: usize) -> Var<'t> {
        let v = self.value();
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|k| (d[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = d[at(k)] - lse;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out);
        self.tape.op(value, &[self], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                    for k in 0..n {
                        gi[at(k)] = g[at(k)] - y[at(k)].exp() * total;
                    }
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), gi))]
        })
    }
}
