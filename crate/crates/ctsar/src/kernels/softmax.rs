//! Numerically stable softmax along an arbitrary axis.

use crate::exec;
use crate::tensor::Scalar;

/// In-place softmax of one contiguous slice (max-subtraction stabilized).
#[inline]
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax of `x` along `axis` for shape split as [outer, len, inner].
pub fn softmax_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let _ = outer;
    let mut y = x.to_vec();
    if inner == 1 {
        exec::for_each_chunk_mut(&mut y, len, |_, row| softmax_row(row));
        return y;
    }
    exec::for_each_chunk_mut(&mut y, len * inner, |_, block| {
        let mut lane = vec![T::zero(); len];
        for i in 0..inner {
            for (j, l) in lane.iter_mut().enumerate() {
                *l = block[j * inner + i];
            }
            softmax_row(&mut lane);
            for (j, &l) in lane.iter().enumerate() {
                block[j * inner + i] = l;
            }
        }
    });
    y
}

/// dx = y * (dy - sum(dy * y along axis)), given the forward output `y`.
pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let _ = outer;
    let mut dx = vec![T::zero(); y.len()];
    exec::for_each_chunk_mut(&mut dx, len * inner, |block_i, block| {
        let yb = &y[block_i * len * inner..(block_i + 1) * len * inner];
        let dyb = &dy[block_i * len * inner..(block_i + 1) * len * inner];
        for i in 0..inner {
            let mut s = T::zero();
            for j in 0..len {
                s = s + dyb[j * inner + i] * yb[j * inner + i];
            }
            for j in 0..len {
                let o = j * inner + i;
                block[o] = yb[o] * (dyb[o] - s);
            }
        }
    });
    dx
}
