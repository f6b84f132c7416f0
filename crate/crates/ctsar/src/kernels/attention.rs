//! Fused spatial self-attention core.
//!
//! Given projected queries/keys [B,Cq,N] and values [B,C,N] over N = H*W
//! positions, computes o[:,i] = sum_j A[i,j] * v[:,j] with
//! A = softmax_j(q[:,i] . k[:,j]). The N x N attention map is never
//! materialized as a tensor: forward streams one row at a time and backward
//! recomputes rows from q and k. This keeps memory linear in N, which is
//! what makes full-resolution inputs tractable.

use crate::exec;
use crate::kernels::matmul::dot;
use crate::kernels::softmax::softmax_row;
use crate::tensor::Scalar;

/// One attention row: scores[j] = q[:,i] . k[:,j], then softmax.
fn attention_row<T: Scalar>(q: &[T], k: &[T], cq: usize, n: usize, i: usize, row: &mut [T]) {
    row.fill(T::zero());
    for c in 0..cq {
        let qv = q[c * n + i];
        let krow = &k[c * n..(c + 1) * n];
        for (r, &kv) in row.iter_mut().zip(krow.iter()) {
            *r = *r + qv * kv;
        }
    }
    softmax_row(row);
}

/// Forward pass. Output layout matches `v`: [B, C, N].
pub fn attn_core_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    cq: usize,
    c: usize,
    n: usize,
) -> Vec<T> {
    debug_assert_eq!(q.len(), batch * cq * n);
    debug_assert_eq!(k.len(), batch * cq * n);
    debug_assert_eq!(v.len(), batch * c * n);
    // Compute transposed [N, C] rows in parallel, then flip to [C, N].
    let mut o = vec![T::zero(); batch * c * n];
    let mut ot = vec![T::zero(); batch * n * c];
    exec::for_each_chunk_mut(&mut ot, c, |bi_row, orow| {
        let (b, i) = (bi_row / n, bi_row % n);
        let qb = &q[b * cq * n..(b + 1) * cq * n];
        let kb = &k[b * cq * n..(b + 1) * cq * n];
        let vb = &v[b * c * n..(b + 1) * c * n];
        let mut arow = vec![T::zero(); n];
        attention_row(qb, kb, cq, n, i, &mut arow);
        for (ch, oc) in orow.iter_mut().enumerate() {
            *oc = dot(&arow, &vb[ch * n..(ch + 1) * n]);
        }
    });
    exec::for_each_chunk_mut(&mut o, c * n, |b, ob| {
        let otb = &ot[b * n * c..(b + 1) * n * c];
        for ch in 0..c {
            for i in 0..n {
                ob[ch * n + i] = otb[i * c + ch];
            }
        }
    });
    o
}

/// Backward pass: gradients w.r.t. q, k, v given upstream do = dL/do.
/// Attention rows are recomputed from q and k; accumulation over rows is
/// sequential per batch item, parallel across batch items.
pub fn attn_core_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    batch: usize,
    cq: usize,
    c: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dq = vec![T::zero(); batch * cq * n];
    let mut dk = vec![T::zero(); batch * cq * n];
    let mut dv = vec![T::zero(); batch * c * n];
    // Split the per-batch gradient buffers so batch items run in parallel.
    let dq_chunks: Vec<(usize, (&mut [T], (&mut [T], &mut [T])))> = dq
        .chunks_mut(cq * n)
        .zip(dk.chunks_mut(cq * n).zip(dv.chunks_mut(c * n)))
        .enumerate()
        .collect();
    run_batch(dq_chunks, |b, dqb, dkb, dvb| {
        let qb = &q[b * cq * n..(b + 1) * cq * n];
        let kb = &k[b * cq * n..(b + 1) * cq * n];
        let vb = &v[b * c * n..(b + 1) * c * n];
        let dob = &dout[b * c * n..(b + 1) * c * n];
        let mut arow = vec![T::zero(); n];
        let mut da = vec![T::zero(); n];
        let mut ds = vec![T::zero(); n];
        for i in 0..n {
            attention_row(qb, kb, cq, n, i, &mut arow);
            // dA[i,j] = do[:,i] . v[:,j]
            da.fill(T::zero());
            for ch in 0..c {
                let g = dob[ch * n + i];
                let vrow = &vb[ch * n..(ch + 1) * n];
                for (d, &vv) in da.iter_mut().zip(vrow.iter()) {
                    *d = *d + g * vv;
                }
                // dv[:,j] += A[i,j] * do[:,i]
                let dvrow = &mut dvb[ch * n..(ch + 1) * n];
                for (dvj, &aj) in dvrow.iter_mut().zip(arow.iter()) {
                    *dvj = *dvj + g * aj;
                }
            }
            // softmax backward on the row: ds = a * (da - (da . a))
            let inner = dot(&da, &arow);
            for j in 0..n {
                ds[j] = arow[j] * (da[j] - inner);
            }
            // dq[:,i] = k . ds ; dk[:,j] += q[:,i] * ds[j]
            for ch in 0..cq {
                let krow = &kb[ch * n..(ch + 1) * n];
                dqb[ch * n + i] = dot(krow, &ds);
                let qv = qb[ch * n + i];
                let dkrow = &mut dkb[ch * n..(ch + 1) * n];
                for (dkj, &dsj) in dkrow.iter_mut().zip(ds.iter()) {
                    *dkj = *dkj + qv * dsj;
                }
            }
        }
    });
    (dq, dk, dv)
}

fn run_batch<T, F>(chunks: Vec<(usize, (&mut [T], (&mut [T], &mut [T])))>, body: F)
where
    T: Scalar,
    F: Fn(usize, &mut [T], &mut [T], &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if crate::exec::parallel_enabled() {
        use rayon::prelude::*;
        chunks
            .into_par_iter()
            .for_each(|(b, (dqb, (dkb, dvb)))| body(b, dqb, dkb, dvb));
        return;
    }
    for (b, (dqb, (dkb, dvb))) in chunks {
        body(b, dqb, dkb, dvb);
    }
}

/// Dense attention map for tests and diagnostics: rows i over positions,
/// columns j over key positions. Independent consumers can check row sums.
pub fn attention_map<T: Scalar>(q: &[T], k: &[T], cq: usize, n: usize) -> Vec<T> {
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        attention_row(q, k, cq, n, i, &mut a[i * n..(i + 1) * n]);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense oracle: explicit loops over the full attention matrix.
    fn attn_oracle(q: &[f64], k: &[f64], v: &[f64], cq: usize, c: usize, n: usize) -> Vec<f64> {
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for ch in 0..cq {
                    s += q[ch * n + i] * k[ch * n + j];
                }
                scores[i * n + j] = s;
            }
        }
        // softmax over j
        for i in 0..n {
            let row = &mut scores[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let mut o = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += v[ch * n + j] * scores[i * n + j];
                }
                o[ch * n + i] = s;
            }
        }
        o
    }

    #[test]
    fn forward_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, cq, c, n) = (2, 1, 8, 4);
        let q: Vec<f64> = (0..b * cq * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..b * cq * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..b * c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = attn_core_forward(&q, &k, &v, b, cq, c, n);
        for bi in 0..b {
            let want = attn_oracle(
                &q[bi * cq * n..(bi + 1) * cq * n],
                &k[bi * cq * n..(bi + 1) * cq * n],
                &v[bi * c * n..(bi + 1) * c * n],
                cq,
                c,
                n,
            );
            for (g, w) in got[bi * c * n..(bi + 1) * c * n].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (cq, n) = (2, 9);
        let q: Vec<f64> = (0..cq * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..cq * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = attention_map(&q, &k, cq, n);
        for i in 0..n {
            let s: f64 = a[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(a[i * n..(i + 1) * n].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, cq, c, n) = (1, 1, 4, 4);
        let q: Vec<f64> = (0..cq * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..cq * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            attn_core_forward(q, k, v, b, cq, c, n)
                .iter()
                .zip(&proj)
                .map(|(o, r)| o * r)
                .sum()
        };
        let (dq, dk, dv) = attn_core_backward(&q, &k, &v, &proj, b, cq, c, n);
        let eps = 1e-5;
        for (which, (analytic, base)) in
            [(0, (&dq, &q)), (1, (&dk, &k)), (2, (&dv, &v))].into_iter()
        {
            for i in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let fd = match which {
                    0 => (loss(&plus, &k, &v) - loss(&minus, &k, &v)) / (2.0 * eps),
                    1 => (loss(&q, &plus, &v) - loss(&q, &minus, &v)) / (2.0 * eps),
                    _ => (loss(&q, &k, &plus) - loss(&q, &k, &minus)) / (2.0 * eps),
                };
                assert!(
                    (analytic[i] - fd).abs() < 1e-7 * fd.abs().max(1.0),
                    "set {which} idx {i}: {} vs {fd}",
                    analytic[i]
                );
            }
        }
    }
}
