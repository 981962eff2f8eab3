//! Bounds-checked wrapper over `matrixmultiply::dgemm` for strided views.

/// Row/column strides of a matrix view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major buffer whose rows have `cols` entries.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
///
/// Views of `a` and `b` may overlap themselves; `c` must not.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(a.len() >= sa.extent(m, k), "gemm: lhs view out of bounds");
    assert!(b.len() >= sb.extent(k, n), "gemm: rhs view out of bounds");
    assert!(c.len() >= sc.extent(m, n), "gemm: output view out of bounds");
    assert!(
        sc.row >= n * sc.col || sc.col >= m * sc.row,
        "gemm: output view aliases itself"
    );
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index touched by dgemm lies within the extents asserted
    // above, and `c` is an exclusive borrow with non-aliasing strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}
