//! Deterministic reductions.
//!
//! Floating-point addition is not associative, so naive parallel reductions
//! depend on the schedule. Everything here reduces in a fixed pairwise tree
//! over fixed chunk boundaries: results are bitwise identical regardless of
//! thread count.

use crate::scalar::Scalar;

/// Chunk width used by the deterministic reductions.
pub const CHUNK: usize = 1024;

/// Pairwise tree sum of a slice.
pub fn tree_sum<F: Scalar>(xs: &[F]) -> F {
    match xs.len() {
        0 => F::zero(),
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}

/// Sum `f(i)` over `i in 0..n` with fixed-chunk sequential inner sums and a
/// pairwise tree over the chunk partials.
pub fn indexed_sum<F: Scalar>(n: usize, f: impl Fn(usize) -> F) -> F {
    if n == 0 {
        return F::zero();
    }
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<F> = (0..n_chunks)
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut acc = F::zero();
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    tree_sum(&partials)
}

/// Mean via [`indexed_sum`].
pub fn indexed_mean<F: Scalar>(n: usize, f: impl Fn(usize) -> F) -> F {
    indexed_sum(n, f) / F::from_usize(n.max(1)).unwrap()
}

/// Sum vectors `f(i)` of dimension `dim` into `out` (overwritten), chunked
/// exactly like [`indexed_sum`] per component.
pub fn indexed_vec_sum<F: Scalar>(n: usize, dim: usize, f: impl Fn(usize, &mut [F]), out: &mut [F]) {
    assert_eq!(out.len(), dim);
    if n == 0 {
        out.fill(F::zero());
        return;
    }
    let n_chunks = n.div_ceil(CHUNK);
    let mut partials = vec![F::zero(); n_chunks * dim];
    let mut scratch = vec![F::zero(); dim];
    for c in 0..n_chunks {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let part = &mut partials[c * dim..(c + 1) * dim];
        for i in lo..hi {
            scratch.fill(F::zero());
            f(i, &mut scratch);
            for (p, s) in part.iter_mut().zip(&scratch) {
                *p += *s;
            }
        }
    }
    for k in 0..dim {
        let col: Vec<F> = (0..n_chunks).map(|c| partials[c * dim + k]).collect();
        out[k] = tree_sum(&col);
    }
}

/// Empirical quantile with linear interpolation between order statistics.
///
/// `sorted` must be ascending; `p` in [0, 1].
pub fn quantile_sorted<F: Scalar>(sorted: &[F], p: f64) -> F {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let w = F::c(h - lo as f64);
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Sort a copy of the slice ascending (total order via `partial_cmp`;
/// callers guarantee no NaNs).
pub fn sorted<F: Scalar>(xs: &[F]) -> Vec<F> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sort"));
    v
}
