//! Broadcasting binary arithmetic and pointwise nonlinearities.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::tape::Var;
use crate::tensor::{strides, Tensor};

fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (left_pad(a, rank), left_pad(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast shapes {a:?} and {b:?}");
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let padded = left_pad(shape, out.len());
    let st = strides(&padded);
    padded.iter().zip(st).zip(out).map(|((&d, s), &o)| if d == 1 && o != 1 { 0 } else { s }).collect()
}

/// Visits every output position with the matching source offsets of both operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |i, oa, ob| data[i] = f(da[oa], db[ob]));
    Tensor::new(out, data)
}

/// Sums `g` over the axes along which `shape` was broadcast.
pub(crate) fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let st = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(&out, &st, &zero, |i, o, _| acc[o] += gd[i]);
    Tensor::new(shape.to_vec(), acc)
}

// Method forms of the operators below, for chaining.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(value, &[self, rhs], move |ctx| {
            vec![Some(reduce_to_shape(ctx.grad, &sa)), Some(reduce_to_shape(ctx.grad, &sb))]
        })
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(value, &[self, rhs], move |ctx| {
            let gb = reduce_to_shape(ctx.grad, &sb).map(|x| -x);
            vec![Some(reduce_to_shape(ctx.grad, &sa)), Some(gb)]
        })
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x * y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(value, &[self, rhs], move |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = reduce_to_shape(&broadcast_binary(ctx.grad, b, |g, y| g * y), &sa);
            let gb = reduce_to_shape(&broadcast_binary(ctx.grad, a, |g, x| g * x), &sb);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x / y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(value, &[self, rhs], move |ctx| {
            let b = ctx.inputs[1];
            let ga = reduce_to_shape(&broadcast_binary(ctx.grad, b, |g, y| g / y), &sa);
            // d(a/b)/db = -out / b
            let q = broadcast_binary(ctx.output, b, |o, y| -o / y);
            let gb = reduce_to_shape(&ctx.grad.zip_map(&q, |g, x| g * x), &sb);
            vec![Some(ga), Some(gb)]
        })
    }

    /// Pointwise map with derivative `df(x, f(x))`.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.op(value, &[self], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data))]
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$method(self, rhs)
            }
        }
    };
}

binary_operator!(Add, add);
binary_operator!(Sub, sub);
binary_operator!(Mul, mul);
binary_operator!(Div, div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.mul_scalar(rhs)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}
