//! Scalar kernels shared by the graph ops and the value-only code paths.

/// A row-major matrix view with an optional transpose, used to describe
/// gemm operands without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows of the stored (untransposed) data.
    pub row_stride: usize,
    pub offset: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            offset: 0,
            transposed: false,
        }
    }

    /// A `rows × cols` window starting at `offset` with the given row stride.
    pub fn strided(data: &'a [f64], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride,
            offset,
            transposed: false,
        }
    }

    pub fn t(mut self) -> Self {
        self.transposed = !self.transposed;
        self
    }

    /// Logical shape after the transpose flag is applied.
    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.row_stride as isize)
        } else {
            (self.row_stride as isize, 1)
        }
    }

    fn check_bounds(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.row_stride + self.cols - 1;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Mutable output window for [`gemm`].
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub offset: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            offset: 0,
        }
    }

    pub fn strided(data: &'a mut [f64], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride,
            offset,
        }
    }
}

/// `c = alpha * a·b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    a.check_bounds();
    b.check_bounds();
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 && n > 0 {
        let last = c.offset + (m - 1) * c.row_stride + n - 1;
        assert!(last < c.data.len(), "gemm output out of bounds");
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.row_stride + j;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            1,
        );
    }
}

/// Logistic function in the branch form that never overflows `exp`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `σ(x) − 1/2`, evaluated as `tanh(x/2)/2`.
///
/// The two forms are equal; this one is exactly odd in `x` and can never
/// leave `[−0.5, 0.5]`.
pub fn centered_sigmoid(x: f64) -> f64 {
    0.5 * (0.5 * x).tanh()
}

/// Log-softmax of one row written into `out`; returns the log-normaliser.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
    lse
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1000.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-1000.0).abs() < 1e-300);
        assert!(sigmoid(-1000.0) >= 0.0);
    }

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &x in &[-20.0, -3.0, -0.1, 0.0, 0.7, 5.0, 30.0] {
            let naive = (1.0 / (1.0 + f64::exp(-x))).ln();
            assert!((log_sigmoid(x) - naive).abs() < 1e-12, "x={x}");
        }
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-12);
        assert_eq!(log_sigmoid(1000.0), 0.0);
    }

    #[test]
    fn centered_sigmoid_agrees_with_sigmoid_minus_half() {
        for &x in &[-40.0, -2.5, -1e-3, 0.0, 1e-6, 0.3, 7.0, 80.0] {
            assert!((centered_sigmoid(x) - (sigmoid(x) - 0.5)).abs() < 1e-15, "x={x}");
            assert_eq!(centered_sigmoid(-x), -centered_sigmoid(x));
        }
        assert_eq!(centered_sigmoid(f64::INFINITY), 0.5);
        assert_eq!(centered_sigmoid(f64::NEG_INFINITY), -0.5);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gemm_handles_transposes() {
        // a: 2x3, b: 2x3 -> a·bᵀ is 2x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&b, 2, 3).t(), 0.0, MatMut::new(&mut c, 2, 2));
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }
}
