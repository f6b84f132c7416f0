//! Dense matrix-multiply kernels shared by matmul, linear, convolution and
//! attention.
//!
//! `C = op_a(A) * op_b(B)` where each op is an optional transpose. Work
//! splits across rows of `C`; the accumulation order inside a row is fixed,
//! so parallel and sequential runs agree bit for bit.

use crate::exec;
use crate::tensor::Scalar;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let whole = a.len() / LANES * LANES;
    let mut i = 0;
    while i < whole {
        for l in 0..LANES {
            acc[l] = acc[l] + a[i + l] * b[i + l];
        }
        i += LANES;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    while i < a.len() {
        s = s + a[i] * b[i];
        i += 1;
    }
    s
}

/// y += alpha * x
#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

/// out[m,n] = op_a(a) * op_b(b).
///
/// Storage: `a` is `[m,k]` when `!ta`, `[k,m]` when `ta`; `b` is `[k,n]`
/// when `!tb`, `[n,k]` when `tb`. `out` must hold `m*n` elements and is
/// overwritten.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    exec::for_each_chunk_mut(out, n.max(1), |i, row| match (ta, tb) {
        (false, false) => {
            row.fill(T::zero());
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                axpy(aik, &b[kk * n..(kk + 1) * n], row);
            }
        }
        (false, true) => {
            let arow = &a[i * k..(i + 1) * k];
            for (j, rj) in row.iter_mut().enumerate() {
                *rj = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        (true, false) => {
            row.fill(T::zero());
            for kk in 0..k {
                axpy(a[kk * m + i], &b[kk * n..(kk + 1) * n], row);
            }
        }
        (true, true) => {
            for (j, rj) in row.iter_mut().enumerate() {
                let mut s = T::zero();
                for kk in 0..k {
                    s = s + a[kk * m + i] * b[j * k + kk];
                }
                *rj = s;
            }
        }
    });
}

/// Batched variant over leading batch dimension: each of the `batch` slabs
/// of `a`, `b`, and `out` is an independent matmul.
pub fn bmm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    // Row-level parallelism across the whole batch: chunk index i encodes
    // (batch, row).
    exec::for_each_chunk_mut(out, n.max(1), |i, row| {
        let (bi, ri) = (i / m, i % m);
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        match (ta, tb) {
            (false, false) => {
                row.fill(T::zero());
                let arow = &ab[ri * k..(ri + 1) * k];
                for (kk, &aik) in arow.iter().enumerate() {
                    axpy(aik, &bb[kk * n..(kk + 1) * n], row);
                }
            }
            (false, true) => {
                let arow = &ab[ri * k..(ri + 1) * k];
                for (j, rj) in row.iter_mut().enumerate() {
                    *rj = dot(arow, &bb[j * k..(j + 1) * k]);
                }
            }
            (true, false) => {
                row.fill(T::zero());
                for kk in 0..k {
                    axpy(ab[kk * m + ri], &bb[kk * n..(kk + 1) * n], row);
                }
            }
            (true, true) => {
                for (j, rj) in row.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for kk in 0..k {
                        s = s + ab[kk * m + ri] * bb[j * k + kk];
                    }
                    *rj = s;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive triple-loop oracle, independent of the kernel above.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn hand_arithmetic_2x2_times_2x1() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0];
        let mut c = [0.0f64; 2];
        matmul(&a, &b, &mut c, 2, 2, 1, false, false);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn identity_times_x_is_x() {
        let id = [1.0f32, 0.0, 0.0, 1.0];
        let x = [3.0f32, -1.0, 2.5, 0.0, 7.0, 9.0];
        let mut c = [0.0f32; 6];
        matmul(&id, &x, &mut c, 2, 2, 3, false, false);
        assert_eq!(c, x);
    }

    #[test]
    fn random_4x5_5x3_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = matmul_oracle(&a, &b, 4, 5, 3);
        let mut c = vec![0.0; 12];
        matmul(&a, &b, &mut c, 4, 5, 3, false, false);
        for (got, want) in c.iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_flags_agree_with_explicit_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = matmul_oracle(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb, aa, bb) in [
            (false, true, a.clone(), bt.clone()),
            (true, false, at.clone(), b.clone()),
            (true, true, at, bt),
        ] {
            let mut c = vec![0.0; m * n];
            matmul(&aa, &bb, &mut c, m, k, n, ta, tb);
            for (got, want) in c.iter().zip(&expected) {
                assert!(
                    (got - want).abs() < 1e-12,
                    "ta={ta} tb={tb}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn bmm_each_batch_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bt, m, k, n) = (3, 2, 4, 3);
        let a: Vec<f64> = (0..bt * m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..bt * k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; bt * m * n];
        bmm(&a, &b, &mut c, bt, m, k, n, false, false);
        for bi in 0..bt {
            let want = matmul_oracle(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            assert_eq!(&c[bi * m * n..(bi + 1) * m * n], &want[..]);
        }
    }

    #[test]
    fn parallel_and_sequential_paths_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (33, 47, 29);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        matmul(&a, &b, &mut c1, m, k, n, false, false);
        crate::exec::set_sequential(true);
        matmul(&a, &b, &mut c2, m, k, n, false, false);
        crate::exec::set_sequential(false);
        assert!(c1.iter().zip(&c2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
