//! Class-weighted cross-entropy over logits, log-sum-exp stabilized.

use crate::tensor::Scalar;

/// loss = sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / sum_i w[y_i]
///
/// Returns the scalar loss plus the per-sample log-sum-exp values and the
/// weight normalizer, which the backward pass reuses.
pub fn weighted_ce_forward<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    weights: &[T],
    classes: usize,
) -> (T, T) {
    let batch = labels.len();
    let mut total = T::zero();
    let mut wsum = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut z = T::zero();
        for &v in row.iter() {
            z = z + (v - max).exp();
        }
        let lse = max + z.ln();
        let w = weights[y];
        total = total + w * (lse - row[y]);
        wsum = wsum + w;
    }
    let _ = batch;
    (total / wsum, wsum)
}

/// dlogits[i,j] = upstream * w[y_i] * (softmax(logits_i)[j] - [j == y_i]) / wsum
pub fn weighted_ce_backward<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    weights: &[T],
    classes: usize,
    wsum: T,
    upstream: T,
) -> Vec<T> {
    let mut d = vec![T::zero(); logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let drow = &mut d[i * classes..(i + 1) * classes];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut z = T::zero();
        for &v in row.iter() {
            z = z + (v - max).exp();
        }
        let scale = upstream * weights[y] / wsum;
        for j in 0..classes {
            let p = (row[j] - max).exp() / z;
            let target = if j == y { T::one() } else { T::zero() };
            drow[j] = scale * (p - target);
        }
    }
    d
}
