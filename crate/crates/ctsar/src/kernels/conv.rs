//! 2-D convolution (cross-correlation semantics) via im2col + matmul.
//!
//! Forward lowers each batch item to a column matrix and multiplies by the
//! flattened kernel. Backward recomputes the column matrix instead of
//! keeping it alive between passes; dW accumulates over batch items in
//! fixed order.

use crate::exec;
use crate::kernels::matmul::matmul;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent: floor((e + 2p - k)/s) + 1, valid only when positive.
    pub fn out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn new(
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let out_h = Self::out_extent(h, kernel, stride, padding)?;
        let out_w = Self::out_extent(w, kernel, stride, padding)?;
        Some(ConvGeom {
            batch,
            in_ch,
            out_ch,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Fill `col` (shape [in_ch*k*k, out_h*out_w]) from one input plane stack
/// `x` (shape [in_ch, h, w]). Out-of-bounds taps read as zero padding.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    debug_assert_eq!(col.len(), g.col_rows() * p);
    exec::for_each_chunk_mut(col, p, |row, out| {
        let kw = row % g.kernel;
        let kh = (row / g.kernel) % g.kernel;
        let c = row / (g.kernel * g.kernel);
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.out_h {
            let iy = (oy * g.stride + kh) as isize - g.padding as isize;
            let base = oy * g.out_w;
            if iy < 0 || iy >= g.h as isize {
                out[base..base + g.out_w].fill(T::zero());
                continue;
            }
            let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
            for ox in 0..g.out_w {
                let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                out[base + ox] = if ix < 0 || ix >= g.w as isize {
                    T::zero()
                } else {
                    src_row[ix as usize]
                };
            }
        }
    });
}

/// Scatter-add the column-space gradient back into one input plane stack.
/// Channel planes are disjoint, so the scatter parallelizes per channel.
fn col2im<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let kk = g.kernel * g.kernel;
    exec::for_each_chunk_mut(dx, g.h * g.w, |c, plane| {
        for r in 0..kk {
            let row = &dcol[(c * kk + r) * p..(c * kk + r + 1) * p];
            let kw = r % g.kernel;
            let kh = r / g.kernel;
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let di = iy as usize * g.w + ix as usize;
                    plane[di] = plane[di] + row[oy * g.out_w + ox];
                }
            }
        }
    });
}

/// y[b,o,:,:] = sum_c w[o,c,:,:] * x[b,c,:,:] + bias[o]
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let in_plane = g.in_ch * g.h * g.w;
    let out_plane = g.out_ch * p;
    let mut y = vec![T::zero(); g.batch * out_plane];
    let mut col = vec![T::zero(); g.col_rows() * p];
    for b in 0..g.batch {
        im2col(&x[b * in_plane..(b + 1) * in_plane], g, &mut col);
        let yb = &mut y[b * out_plane..(b + 1) * out_plane];
        matmul(weight, &col, yb, g.out_ch, g.col_rows(), p, false, false);
        exec::for_each_chunk_mut(yb, p, |o, row| {
            let bo = bias[o];
            for v in row.iter_mut() {
                *v = *v + bo;
            }
        });
    }
    y
}

/// Gradients w.r.t. input, weight, and bias. `need_dx` skips the input
/// gradient for the first layer, where nothing consumes it.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.positions();
    let ckk = g.col_rows();
    let in_plane = g.in_ch * g.h * g.w;
    let out_plane = g.out_ch * p;

    let mut dbias = vec![T::zero(); g.out_ch];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let row = &dy[b * out_plane + o * p..b * out_plane + (o + 1) * p];
            let mut s = T::zero();
            for &v in row {
                s = s + v;
            }
            dbias[o] = dbias[o] + s;
        }
    }

    let mut dweight = vec![T::zero(); g.out_ch * ckk];
    let mut dw_part = vec![T::zero(); g.out_ch * ckk];
    let mut col = vec![T::zero(); ckk * p];
    let mut dx = if need_dx {
        Some(vec![T::zero(); g.batch * in_plane])
    } else {
        None
    };
    let mut dcol = vec![T::zero(); ckk * p];

    for b in 0..g.batch {
        im2col(&x[b * in_plane..(b + 1) * in_plane], g, &mut col);
        let dyb = &dy[b * out_plane..(b + 1) * out_plane];
        // dW_b = dY_b [out_ch,p] * col^T [p,ckk]
        matmul(dyb, &col, &mut dw_part, g.out_ch, p, ckk, false, true);
        for (w, &pw) in dweight.iter_mut().zip(dw_part.iter()) {
            *w = *w + pw;
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T [ckk,out_ch] * dY_b [out_ch,p]
            matmul(weight, dyb, &mut dcol, ckk, g.out_ch, p, true, false);
            col2im(&dcol, g, &mut dx[b * in_plane..(b + 1) * in_plane]);
        }
    }
    (dx, dweight, dbias)
}
