//! Matrix products backed by `matrixmultiply`.

use crate::tape::Var;
use crate::tensor::Tensor;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: every view was built from a slice covering rows*cols elements at the
    // given strides, and `c` holds m*n row-major entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [m, n] => (1, m, n),
        [b, m, n] => (b, m, n),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

impl<'t> Var<'t> {
    /// Batched matrix product `(B, M, K) × (B, K, N) → (B, M, N)`; rank-2 inputs are a batch of one.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.rank(), b.rank(), "matmul rank mismatch");
        let (ba, m, k) = batch_dims(a.shape());
        let (bb, k2, n) = batch_dims(b.shape());
        assert!(ba == bb && k == k2, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            gemm(
                Mat::row_major(&a.data()[i * m * k..], m, k),
                Mat::row_major(&b.data()[i * k * n..], k, n),
                &mut out[i * m * n..],
                0.0,
            );
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
        self.tape.op(Tensor::new(shape, out), &[self, rhs], move |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut ga = vec![0.0; ba * m * k];
            let mut gb = vec![0.0; ba * k * n];
            for i in 0..ba {
                let gm = Mat::row_major(&g[i * m * n..], m, n);
                gemm(gm, Mat::row_major(&b[i * k * n..], k, n).t(), &mut ga[i * m * k..], 0.0);
                gemm(Mat::row_major(&a[i * m * k..], m, k).t(), gm, &mut gb[i * k * n..], 0.0);
            }
            vec![
                Some(Tensor::new(ctx.inputs[0].shape().to_vec(), ga)),
                Some(Tensor::new(ctx.inputs[1].shape().to_vec(), gb)),
            ]
        })
    }
}
