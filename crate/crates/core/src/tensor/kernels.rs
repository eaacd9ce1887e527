//! Strided GEMM on flat row-major buffers.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `[rows, cols]` matrix.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a · b + beta · c` where `a` is `[m, k]`, `b` is `[k, n]`, and `c` is
/// row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(max_index(m, k, la) < a.len());
    assert!(max_index(k, n, lb) < b.len());
    // SAFETY: the asserts above bound every index touched through the
    // strides, and `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, l: Layout) -> usize {
    (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize
}
