//! Max pooling and adaptive average pooling over [B,C,H,W] planes.

use crate::exec;
use crate::tensor::Scalar;

/// Window max with floor semantics on odd extents. Returns the pooled
/// values and, per output cell, the flat in-plane index of the winning
/// element (first encountered on ties) for the backward pass.
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<u32>) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut y = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    exec::for_each_chunk_pair_mut(&mut y, oh * ow, &mut arg, oh * ow, |pl, yp, ap| {
        let plane = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane[oy * s * w + ox * s];
                let mut best_i = (oy * s * w + ox * s) as u32;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (oy * s + ky) * w + ox * s + kx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i as u32;
                        }
                    }
                }
                yp[oy * ow + ox] = best;
                ap[oy * ow + ox] = best_i;
            }
        }
    });
    (y, arg)
}

/// Route each output gradient to its argmax element.
pub fn maxpool2d_backward<T: Scalar>(
    dy: &[T],
    arg: &[u32],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let per_out = dy.len() / planes;
    let mut dx = vec![T::zero(); planes * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |pl, plane| {
        let dyp = &dy[pl * per_out..(pl + 1) * per_out];
        let ap = &arg[pl * per_out..(pl + 1) * per_out];
        for (g, &i) in dyp.iter().zip(ap.iter()) {
            plane[i as usize] = plane[i as usize] + *g;
        }
    });
    dx
}

/// Window bounds for adaptive pooling: [floor(i*e/o), ceil((i+1)*e/o)).
#[inline]
pub fn adaptive_window(i: usize, extent: usize, out: usize) -> (usize, usize) {
    (i * extent / out, ((i + 1) * extent + out - 1) / out)
}

pub fn adaptive_avgpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); planes * oh * ow];
    exec::for_each_chunk_mut(&mut y, oh * ow, |pl, yp| {
        let plane = &x[pl * h * w..(pl + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = adaptive_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_window(j, w, ow);
                let mut s = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s = s + plane[yy * w + xx];
                    }
                }
                let area = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                yp[i * ow + j] = s / area;
            }
        }
    });
    y
}

/// Each input cell receives dy/area from every window that covers it
/// (windows may overlap when extents are not divisible by the grid).
pub fn adaptive_avgpool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |pl, plane| {
        let dyp = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        for i in 0..oh {
            let (y0, y1) = adaptive_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_window(j, w, ow);
                let area = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let g = dyp[i * ow + j] / area;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        plane[yy * w + xx] = plane[yy * w + xx] + g;
                    }
                }
            }
        }
    });
    dx
}
