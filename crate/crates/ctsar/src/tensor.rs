//! Dense row-major tensors over `f32` or `f64`.
//!
//! Values are immutable once produced by an operation; the optimizer mutates
//! parameters in place through [`Tensor::data_mut`]. Clones are cheap (the
//! buffer is behind an `Arc`), which is what lets the tape hold activations
//! and parameters without copying.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + Send + Sync + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sample_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// N-dimensional array of real values with row-major contiguous storage.
///
/// Invariants: `product(shape) == data.len()`, every extent is >= 1, and all
/// stored values are finite after any public operation on finite inputs
/// (checked in debug builds).
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "shape extents must be >= 1, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Fan-in scaled normal init: std = sqrt(2 / fan_in).
    pub fn randn_scaled<R: Rng>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let std = T::from_f64((2.0 / fan_in as f64).sqrt());
        let data = (0..n).map(|_| T::sample_normal(rng) * std).collect();
        Tensor::new(shape, data)
    }

    /// Uniform values in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for in-place updates (optimizer steps). Copies the
    /// buffer first if it is still shared with a tape.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&x| x.to_f64()).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// True when `rhs` broadcasts into this tensor's shape by standard
    /// trailing-dimension alignment (each aligned extent of `rhs` equals
    /// this one's or is 1; `rhs` may not be wider).
    pub fn broadcasts_from(&self, rhs: &Tensor<T>) -> bool {
        broadcast_compatible(&self.shape, &rhs.shape)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

/// `rhs` broadcastable into `out` under trailing-dimension alignment.
pub fn broadcast_compatible(out: &[usize], rhs: &[usize]) -> bool {
    if rhs.len() > out.len() {
        return false;
    }
    let offset = out.len() - rhs.len();
    rhs.iter()
        .zip(out[offset..].iter())
        .all(|(&r, &o)| r == o || r == 1)
}

/// Strides of `rhs` aligned to the (wider) `out` shape, with zero stride on
/// broadcast dimensions. Used to iterate `rhs` in `out` index order.
fn broadcast_strides(out: &[usize], rhs: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let offset = out.len() - rhs.len();
    let mut acc = 1usize;
    for i in (0..rhs.len()).rev() {
        if rhs[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= rhs[i];
    }
    strides
}

/// Elementwise combine with `rhs` broadcast into `lhs`'s shape.
pub fn broadcast_zip<T: Scalar>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if !lhs.broadcasts_from(rhs) {
        return Err(Error::ShapeMismatch {
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        });
    }
    let out_shape = lhs.shape().to_vec();
    let a = lhs.data();
    let b = rhs.data();

    // Fast paths: identical shape, scalar rhs, and rhs equal to a trailing
    // suffix of lhs (bias-style adds).
    let data: Vec<T> = if lhs.shape() == rhs.shape() {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if rhs.numel() == 1 {
        let y = b[0];
        a.iter().map(|&x| f(x, y)).collect()
    } else if is_trailing_suffix(lhs.shape(), rhs.shape()) {
        let m = rhs.numel();
        a.chunks_exact(m)
            .flat_map(|chunk| chunk.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let strides = broadcast_strides(&out_shape, rhs.shape());
        let mut idx = vec![0usize; out_shape.len()];
        let mut out = Vec::with_capacity(a.len());
        let mut roff = 0usize;
        for &x in a {
            out.push(f(x, b[roff]));
            // advance the multi-index, keeping rhs offset in sync
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                roff += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                roff -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        out
    };
    Ok(Tensor::new(out_shape, data))
}

fn is_trailing_suffix(out: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= out.len() && out[out.len() - rhs.len()..] == *rhs
}

/// Sum `grad` (shaped like the broadcast output) down to `target` shape.
/// This is the adjoint of broadcasting and is used by backward rules.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    debug_assert!(broadcast_compatible(grad.shape(), target));
    let out_shape = grad.shape();
    let strides = broadcast_strides(out_shape, target);
    let n_target: usize = target.iter().product();
    let mut acc = vec![T::zero(); n_target];
    let mut idx = vec![0usize; out_shape.len()];
    let mut roff = 0usize;
    for &g in grad.data() {
        acc[roff] = acc[roff] + g;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            roff += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            roff -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(target.to_vec(), acc)
}

/// Debug-build finiteness check implementing the NaN policy: turn silent
/// divergence into an immediate failure naming the producing op.
#[inline]
pub fn debug_assert_finite<T: Scalar>(t: &Tensor<T>, op: &str) {
    #[cfg(debug_assertions)]
    {
        assert!(t.all_finite(), "non-finite value produced by `{op}`");
    }
    #[cfg(not(debug_assertions))]
    {
        let _ = (t, op);
    }
}
