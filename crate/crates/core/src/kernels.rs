//! Dense matrix kernels backing the `matmul` primitive.

use crate::par;

/// Storage order of a logical matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored row-major with the logical shape.
    Normal,
    /// Stored row-major as the transpose of the logical shape.
    Transposed,
}

impl Layout {
    /// (row stride, column stride) of a logical `rows × cols` matrix.
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::Normal => (cols as isize, 1),
            Layout::Transposed => (1, rows as isize),
        }
    }
}

/// Output rows handled by one task. Fixed so that the partition, and hence
/// every floating-point result, is independent of the thread count.
const ROW_CHUNK: usize = 16;
/// Below this many multiply-adds the product runs as a single task.
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// `C = op(A)·op(B)` (or `C += ...` when `accumulate`), with `C` an `m × n`
/// row-major buffer, `op(A)` logically `m × k` and `op(B)` logically `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: A buffer too small");
    assert!(b.len() >= k * n, "gemm: B buffer too small");
    assert_eq!(c.len(), m * n, "gemm: C buffer size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsb, csb) = b_layout.strides(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };

    let run = |row0: usize, c_rows: &mut [f64]| {
        let rows = c_rows.len() / n;
        // SAFETY: A covers rows row0..row0+rows of an m×k operand with the
        // given strides, B is k×n, and C is exactly rows×n; all lengths were
        // asserted above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m * k * n < PARALLEL_MIN_WORK || m <= ROW_CHUNK {
        run(0, c);
    } else {
        par::for_each_chunk_mut(c, ROW_CHUNK * n, |i, chunk| run(i * ROW_CHUNK, chunk));
    }
}
