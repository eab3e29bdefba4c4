//! Raw slice kernels. Semantics are those of the naive loops; the loop order
//! is chosen so inner loops are contiguous and vectorize.
//!
//! Multi-threaded variants partition *output rows* only, so every output
//! element is accumulated in the same order regardless of the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::Float;

static THREADS: AtomicUsize = AtomicUsize::new(1);

// Below this many multiply-adds a kernel stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 20;

pub fn set_num_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn num_threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

#[inline]
pub(crate) fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler keep several lanes busy.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn split_rows<T: Send, F>(out: &mut [T], row_len: usize, rows: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    let threads = num_threads().min(rows.max(1));
    if threads <= 1 || work < PARALLEL_THRESHOLD {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, chunk) in out.chunks_mut(per * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || f(t * per, chunk));
        }
    });
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_acc<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    split_rows(out, n, m, m * k * n, |row0, chunk| {
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + r;
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &aip) in a_row.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                axpy(aip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    });
}

/// `out[m,k] += d[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_bt_acc<T: Float>(m: usize, k: usize, n: usize, d: &[T], b: &[T], out: &mut [T]) {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    gemm_acc(m, n, k, d, &bt, out);
}

/// `out[k,n] += a[m,k]ᵀ · d[m,n]`
pub(crate) fn gemm_at_acc<T: Float>(m: usize, k: usize, n: usize, a: &[T], d: &[T], out: &mut [T]) {
    if n == 0 {
        return;
    }
    split_rows(out, n, k, m * k * n, |p0, chunk| {
        let rows = chunk.len() / n;
        for i in 0..m {
            let d_row = &d[i * n..(i + 1) * n];
            let a_row = &a[i * k + p0..i * k + p0 + rows];
            for (r, &aip) in a_row.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                axpy(aip, d_row, &mut chunk[r * n..(r + 1) * n]);
            }
        }
    });
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
