//! The single inner product kernel shared by convolution and patch matching.
//!
//! Everything is expressed as `C = A · Bᵀ` with both operands stored as
//! row-major "patch rows": for convolution `A` holds the filters and `B`
//! the unrolled input windows, for matching `A` holds query patches and `B`
//! the style patches. Reduction order is fixed, so results are bitwise
//! reproducible regardless of the rayon thread count.

use rayon::prelude::*;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// One output row: `out[j] = dot(row, b_j)` for every row `b_j` of `b`.
#[inline]
pub fn dot_rows(row: &[f32], b: &[f32], k: usize, out: &mut [f32]) {
    debug_assert_eq!(b.len(), out.len() * k);
    if k == 0 {
        out.fill(0.0);
        return;
    }
    for (o, b_row) in out.iter_mut().zip(b.chunks_exact(k)) {
        *o = dot(row, b_row);
    }
}

/// `A (m×k) · Bᵀ` where `B` is `n×k`. Returns the `m×n` product, row-major.
pub fn gemm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k, "lhs has wrong length");
    assert_eq!(b.len(), n * k, "rhs has wrong length");
    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row_out)| {
        let row = &a[i * k..(i + 1) * k];
        dot_rows(row, b, k, row_out);
    });
    out
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
