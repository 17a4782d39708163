//! Bounds-checked strided matrix multiply on top of `matrixmultiply::sgemm`.

use half::bf16;

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous row-major `[rows, cols]` view.
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view (no copy).
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    /// Column block `[.., start..start+width]` of this view.
    pub fn cols_slice(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self {
            offset: self.offset + start * self.col_stride,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(
            last < self.data.len(),
            "matrix view out of bounds: last index {last}, len {}",
            self.data.len()
        );
    }
}

/// A strided mutable matrix view.
pub struct MatMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn cols_slice(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self {
            offset: self.offset + start * self.col_stride,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "output matrix view out of bounds");
    }
}

/// Rounds every value to the nearest bfloat16, emulating a reduced-precision
/// matmul input.
pub fn round_bf16(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| bf16::from_f32(v).to_f32()).collect()
}

/// `c = alpha * a @ b + beta * c`.
///
/// With `low_precision` set, the operands are rounded to bfloat16 first while
/// accumulation stays in `f32`.
pub fn gemm(alpha: f32, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: MatMut<'_>, low_precision: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm output rows mismatch");
    assert_eq!(b.cols, c.cols, "gemm output cols mismatch");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if low_precision {
        let ra = round_bf16(a.data);
        let rb = round_bf16(b.data);
        let a2 = MatRef { data: &ra, ..a };
        let b2 = MatRef { data: &rb, ..b };
        return gemm(alpha, a2, b2, beta, c, false);
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is a unique mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Convenience: contiguous `[m,k] @ [k,n] -> [m,n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::new(a, m, k),
        MatRef::new(b, k, n),
        0.0,
        MatMut::new(&mut out, m, n),
        false,
    );
    out
}
