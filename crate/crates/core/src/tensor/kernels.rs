//! Dense row-major kernels.
//!
//! Every output row is produced by [`row_gemm`], whose accumulation order
//! depends only on that row's inputs. That keeps results independent of the
//! batch size, the batch order, and of whether rows are computed in parallel.

use super::Element;
use crate::parallel;

/// `out += a_row · b`, where `b` is `k × n` row-major and `a_row` has length `k`.
#[inline]
pub fn row_gemm<T: Element>(a_row: &[T], b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), n);
    debug_assert_eq!(b.len(), a_row.len() * n);
    for (p, &a) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// Batched `a[batch, m, k] · b[batch?, k, n]`. When `b_shared` is set, `b`
/// is a single `k × n` matrix applied to every batch.
pub fn batched_gemm<T: Element>(
    a: &[T],
    batches: usize,
    m: usize,
    k: usize,
    b: &[T],
    b_shared: bool,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batches * m * n];
    parallel::for_each_row(&mut out, n, |row, dst| gemm_row(a, m, k, b, b_shared, n, row, dst));
    out
}

/// Sequential twin of [`batched_gemm`]; exposed for benchmarking.
pub fn batched_gemm_seq<T: Element>(
    a: &[T],
    batches: usize,
    m: usize,
    k: usize,
    b: &[T],
    b_shared: bool,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batches * m * n];
    parallel::for_each_row_seq(&mut out, n, |row, dst| {
        gemm_row(a, m, k, b, b_shared, n, row, dst)
    });
    out
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_row<T: Element>(
    a: &[T],
    m: usize,
    k: usize,
    b: &[T],
    b_shared: bool,
    n: usize,
    row: usize,
    dst: &mut [T],
) {
    let batch = row / m;
    let a_row = &a[row * k..(row + 1) * k];
    let b_mat = if b_shared {
        b
    } else {
        &b[batch * k * n..(batch + 1) * k * n]
    };
    row_gemm(a_row, b_mat, n, dst);
}

/// Transposes the trailing two axes of `x[batch, rows, cols]`.
pub fn transpose_batched<T: Element>(x: &[T], batches: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batches {
        let src = &x[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// General axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let nd = out_shape.len();
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        out.push(x[offset]);
        // odometer increment
        let mut axis = nd;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let a = [1.0f32, 0.0, 0.0, 1.0];
        let b = [3.0f32, 4.0, 5.0, 6.0];
        assert_eq!(batched_gemm(&a, 1, 2, 2, &b, true, 2), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn permute_matches_transpose() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let t = transpose_batched(&x, 2, 3, 4);
        let p = permute(&x, &[2, 3, 4], &[0, 2, 1]);
        assert_eq!(t, p);
    }

    #[test]
    fn permute_3d_roundtrip() {
        let x: Vec<f64> = (0..60).map(|v| v as f64).collect();
        let shape = [3, 4, 5];
        let p = permute(&x, &shape, &[2, 0, 1]);
        // inverse of [2,0,1] is [1,2,0]
        let back = permute(&p, &[5, 3, 4], &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn seq_and_default_paths_agree() {
        let a: Vec<f32> = (0..6 * 40 * 33).map(|i| ((i * 7919) % 113) as f32 / 57.0 - 1.0).collect();
        let b: Vec<f32> = (0..33 * 70).map(|i| ((i * 104729) % 97) as f32 / 48.0 - 1.0).collect();
        let x = batched_gemm(&a, 6, 40, 33, &b, true, 70);
        let y = batched_gemm_seq(&a, 6, 40, 33, &b, true, 70);
        assert_eq!(x, y);
    }
}
