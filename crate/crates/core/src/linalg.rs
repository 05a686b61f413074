//! Thin safe wrappers over `matrixmultiply::sgemm` for row-major buffers.

/// Row-major view of a (possibly strided) matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    /// Dense `rows × cols` matrix.
    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a dense matrix with `ld` columns, starting at `row0`.
    pub fn block(data: &'a [f32], ld: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        Self { data: &data[row0 * ld + col0..], rows, cols, row_stride: ld, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, row_stride: self.col_stride, col_stride: self.row_stride, data: self.data }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// Mutable counterpart of [`View`].
pub struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn dense(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols }
    }

    pub fn block(data: &'a mut [f32], ld: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Self {
        Self { data: &mut data[row0 * ld + col0..], rows, cols, row_stride: ld }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm(alpha: f32, a: View, b: View, beta: f32, c: ViewMut) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span(), "operand out of bounds");
    let c_span = if c.rows == 0 || c.cols == 0 { 0 } else { (c.rows - 1) * c.row_stride + c.cols };
    assert!(c.data.len() >= c_span, "output out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every operand's addressed span was bounds-checked above and
    // `c` is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        );
    }
}

/// Dense `out = x @ w` with `x: m×k`, `w: k×n`.
pub fn matmul(x: &[f32], w: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    gemm(1.0, View::dense(x, m, k), View::dense(w, k, n), 0.0, ViewMut::dense(out, m, n));
}

/// `dw += x^T @ dy` with `x: m×k`, `dy: m×n`.
pub fn accumulate_xt_dy(x: &[f32], dy: &[f32], m: usize, k: usize, n: usize, dw: &mut [f32]) {
    gemm(1.0, View::dense(x, m, k).t(), View::dense(dy, m, n), 1.0, ViewMut::dense(dw, k, n));
}

/// `dx (+)= dy @ w^T` with `dy: m×n`, `w: k×n`.
pub fn dy_wt(dy: &[f32], w: &[f32], m: usize, k: usize, n: usize, dx: &mut [f32], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(1.0, View::dense(dy, m, n), View::dense(w, k, n).t(), beta, ViewMut::dense(dx, m, k));
}
