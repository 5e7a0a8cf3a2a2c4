//! Dense matmul kernels. Row-parallel over rayon, so results are bitwise
//! deterministic regardless of thread count (no cross-thread reductions).

use super::Element;
use rayon::prelude::*;

/// Work threshold below which threading overhead outweighs the win.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [E]| {
        crow.fill(E::ZERO);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T  (rows of a dotted with rows of b)
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// Dot product over independent accumulator lanes. A single fma chain would
/// serialize and defeat vectorization; eight lanes let LLVM keep one vector
/// accumulator. The summation order is fixed, so results stay deterministic.
#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let av = &a[c * LANES..(c + 1) * LANES];
        let bv = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = av[l].mul_add(bv[l], acc[l]);
        }
    }
    let mut tail = E::ZERO;
    for i in chunks * LANES..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let mut total = tail;
    for v in acc {
        total = total + v;
    }
    total
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    // Parallelising over output rows would stride badly through `a`; split the
    // m-reduction across row blocks of c instead. Sequential accumulation per
    // output row keeps determinism.
    let body = |crange: std::ops::Range<usize>, c: &mut [E]| {
        c.fill(E::ZERO);
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in crange.clone() {
                let av = a[i * k + p];
                let crow = &mut c[(p - crange.start) * n..(p - crange.start + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k >= 8 {
        let nthreads = rayon::current_num_threads().max(1);
        let chunk = k.div_ceil(nthreads);
        c.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, cchunk)| {
                let start = ci * chunk;
                let end = (start + cchunk.len() / n).min(k);
                body(start..end, cchunk);
            });
    } else {
        body(0..k, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // nt: feed b transposed
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_nt(&a, &bt, m, k, n, &mut c2);
        assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // tn: feed a transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        // c3[m,n] = at[k,m]^T * b... dims: matmul_tn(a=[k rows of m], ...)
        matmul_tn(&at, &b[..], k, m, n, &mut c3);
        // at is [k,m]; at^T is [m,k]; b must be [k,n]; here the reduction dim is k.
        let want2 = naive(&a, &b, m, k, n);
        assert!(c3.iter().zip(&want2).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn parallel_path_matches_serial() {
        let (m, k, n) = (130, 64, 64); // above the flop threshold
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 40503) % 1000) as f32 / 1000.0 - 0.5).collect();
        let mut c = vec![0.0f32; m * n];
        matmul_nn(&a, &b, m, k, n, &mut c);
        // serial reference with identical per-row accumulation order
        let mut c_ref = vec![0.0f32; m * n];
        for i in 0..m {
            let crow = &mut c_ref[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    crow[j] = av.mul_add(b[p * n + j], crow[j]);
                }
            }
        }
        assert_eq!(c, c_ref, "row-parallel matmul must be bitwise deterministic");
    }
}
