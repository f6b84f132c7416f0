//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding the produced value, the parent
//! indices, and enough auxiliary state to replay its backward rule. Node
//! order is the topological order of the computation, so the backward pass
//! is a single reverse sweep with fixed accumulation order — gradients are
//! bit-reproducible run to run.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{attention, conv, loss, matmul, pool, softmax};
use crate::tensor::{broadcast_zip, debug_assert_finite, reduce_to_shape, Scalar, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: conv::ConvGeom,
    },
    MaxPool {
        x: usize,
        h: usize,
        w: usize,
        arg: Vec<u32>,
    },
    AdaptiveAvgPool {
        x: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Reshape(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    AttnCore {
        q: usize,
        k: usize,
        v: usize,
        cq: usize,
        c: usize,
        n: usize,
    },
    Sum(usize),
    WeightedCe {
        logits: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
        wsum: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by the parameter leaves of one backward pass.
pub struct Gradient<T: Scalar> {
    tape: u64,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.by_node.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grad_leaves: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_leaves: Vec::new(),
        }
    }

    /// Record a non-differentiated input (e.g. an image batch).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable parameter; backward will report its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.grad_leaves.push(v.index);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.index].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(v.index)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- elementwise family ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = broadcast_zip(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x + y)?;
        debug_assert_finite(&value, "add");
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = broadcast_zip(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y)?;
        debug_assert_finite(&value, "mul");
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(value, Op::Mul(ia, ib), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(value, Op::Relu(ix), rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (
            self.nodes[ia].value.shape().to_vec(),
            self.nodes[ib].value.shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch { lhs: sa, rhs: sb });
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::InnerDimMismatch { m, k, k2, n });
        }
        let mut out = vec![T::zero(); m * n];
        matmul::matmul(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
        );
        let value = Tensor::new(vec![m, n], out);
        debug_assert_finite(&value, "matmul");
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    /// Batched matmul over rank-3 tensors with optional per-operand
    /// transposes of the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (
            self.nodes[ia].value.shape().to_vec(),
            self.nodes[ib].value.shape().to_vec(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch { lhs: sa, rhs: sb });
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::InnerDimMismatch { m, k, k2, n });
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        matmul::bmm(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        );
        let value = Tensor::new(vec![batch, m, n], out);
        debug_assert_finite(&value, "bmm");
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(
            value,
            Op::Bmm {
                a: ia,
                b: ib,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// x[B,F] * weight[O,F]^T + bias[O]
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 2 || sw.len() != 2 {
            return Err(Error::ShapeMismatch { lhs: sx, rhs: sw });
        }
        if sx[1] != sw[1] {
            return Err(Error::FeatureMismatch {
                input: sx[1],
                expected: sw[1],
            });
        }
        let (bsz, f, o) = (sx[0], sx[1], sw[0]);
        if self.nodes[ib].value.shape() != [o] {
            return Err(Error::ShapeMismatch {
                lhs: self.nodes[ib].value.shape().to_vec(),
                rhs: vec![o],
            });
        }
        let mut out = vec![T::zero(); bsz * o];
        matmul::matmul(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            &mut out,
            bsz,
            f,
            o,
            false,
            true,
        );
        let bias_data = self.nodes[ib].value.data();
        for row in out.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(bias_data.iter()) {
                *v = *v + bv;
            }
        }
        let value = Tensor::new(vec![bsz, o], out);
        debug_assert_finite(&value, "linear");
        let rg = self.needs_grad(&[ix, iw, ib]);
        Ok(self.push(
            value,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
            rg,
        ))
    }

    // ---- structured layers ----

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch { lhs: sx, rhs: sw });
        }
        if sx[1] != sw[1] {
            return Err(Error::ChannelMismatch {
                input: sx[1],
                expected: sw[1],
            });
        }
        let geom = conv::ConvGeom::new(sx[0], sx[1], sw[0], sx[2], sx[3], sw[2], stride, padding)
            .ok_or(Error::NonPositiveOutput {
            h: sx[2],
            w: sx[3],
        })?;
        if self.nodes[ib].value.shape() != [geom.out_ch] {
            return Err(Error::ShapeMismatch {
                lhs: self.nodes[ib].value.shape().to_vec(),
                rhs: vec![geom.out_ch],
            });
        }
        let out = conv::conv2d_forward(
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            self.nodes[ib].value.data(),
            &geom,
        );
        let value = Tensor::new(
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            out,
        );
        debug_assert_finite(&value, "conv2d");
        let rg = self.needs_grad(&[ix, iw, ib]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                lhs: sx,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (h, w) = (sx[2], sx[3]);
        if h < k || w < k {
            return Err(Error::InputSmallerThanKernel {
                h,
                w,
                kh: k,
                kw: k,
            });
        }
        let planes = sx[0] * sx[1];
        let (out, arg) = pool::maxpool2d_forward(self.nodes[ix].value.data(), planes, h, w, k, s);
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        let value = Tensor::new(vec![sx[0], sx[1], oh, ow], out);
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(value, Op::MaxPool { x: ix, h, w, arg }, rg))
    }

    pub fn adaptive_avgpool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let sx = self.nodes[ix].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                lhs: sx,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (h, w) = (sx[2], sx[3]);
        if h < oh || w < ow {
            return Err(Error::InputSmallerThanGrid { h, w, oh, ow });
        }
        let planes = sx[0] * sx[1];
        let out =
            pool::adaptive_avgpool_forward(self.nodes[ix].value.data(), planes, h, w, oh, ow);
        let value = Tensor::new(vec![sx[0], sx[1], oh, ow], out);
        debug_assert_finite(&value, "adaptive_avgpool2d");
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            value,
            Op::AdaptiveAvgPool {
                x: ix,
                h,
                w,
                oh,
                ow,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.reshaped(shape)?;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(value, Op::Reshape(ix), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = softmax::softmax_axis(self.nodes[ix].value.data(), outer, len, inner);
        let value = Tensor::new(shape, out);
        debug_assert_finite(&value, "softmax");
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(
            value,
            Op::Softmax {
                x: ix,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Fused attention core over projected q/k [B,Cq,N] and v [B,C,N].
    pub fn attn_core(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let sq = self.nodes[iq].value.shape().to_vec();
        let sk = self.nodes[ik].value.shape().to_vec();
        let sv = self.nodes[iv].value.shape().to_vec();
        if sq.len() != 3 || sq != sk || sv.len() != 3 || sv[0] != sq[0] || sv[2] != sq[2] {
            return Err(Error::ShapeMismatch { lhs: sq, rhs: sv });
        }
        let (batch, cq, n, c) = (sq[0], sq[1], sq[2], sv[1]);
        let out = attention::attn_core_forward(
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
            batch,
            cq,
            c,
            n,
        );
        let value = Tensor::new(vec![batch, c, n], out);
        debug_assert_finite(&value, "attn_core");
        let rg = self.needs_grad(&[iq, ik, iv]);
        Ok(self.push(
            value,
            Op::AttnCore {
                q: iq,
                k: ik,
                v: iv,
                cq,
                c,
                n,
            },
            rg,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let mut s = T::zero();
        for &v in self.nodes[ix].value.data() {
            s = s + v;
        }
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    /// Class-weighted cross-entropy over logits [B,classes]; scalar output.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[T],
    ) -> Result<Var> {
        let il = self.check(logits)?;
        let shape = self.nodes[il].value.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] != weights.len() {
            return Err(Error::ShapeMismatch {
                lhs: shape,
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange(bad));
        }
        let (value, wsum) =
            loss::weighted_ce_forward(self.nodes[il].value.data(), labels, weights, classes);
        let t = Tensor::scalar(value);
        debug_assert_finite(&t, "weighted_cross_entropy");
        let rg = self.nodes[il].requires_grad;
        Ok(self.push(
            t,
            Op::WeightedCe {
                logits: il,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                wsum,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter leaf; leaves the loss does not reach get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradient<T>> {
        let il = self.check(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::NonScalarLoss(
                self.nodes[il].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::scalar(T::one()));

        for i in (0..=il).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for collection
            }
        }

        let mut by_node = HashMap::new();
        for &leaf in &self.grad_leaves {
            let g = grads[leaf]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[leaf].value.shape().to_vec()));
            by_node.insert(leaf, g);
        }
        Ok(Gradient {
            tape: self.id,
            by_node,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, add: Tensor<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                let sum = broadcast_zip(existing, &add, |a, b| a + b).expect("gradient shapes");
                *existing = sum;
            }
            slot @ None => *slot = Some(add),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, a, reduce_to_shape(g, self.nodes[a].value.shape()));
                self.accumulate(grads, b, reduce_to_shape(g, self.nodes[b].value.shape()));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let ga = broadcast_zip(g, &self.nodes[b].value, |x, y| x * y)?;
                    self.accumulate(grads, a, reduce_to_shape(&ga, self.nodes[a].value.shape()));
                }
                if self.nodes[b].requires_grad {
                    let gb = broadcast_zip(g, &self.nodes[a].value, |x, y| x * y)?;
                    self.accumulate(grads, b, reduce_to_shape(&gb, self.nodes[b].value.shape()));
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xin = &self.nodes[x].value;
                let data = g
                    .data()
                    .iter()
                    .zip(xin.data().iter())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, Tensor::new(xin.shape().to_vec(), data));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    matmul::matmul(
                        g.data(),
                        self.nodes[b].value.data(),
                        &mut da,
                        m,
                        n,
                        k,
                        false,
                        true,
                    );
                    self.accumulate(grads, a, Tensor::new(vec![m, k], da));
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    matmul::matmul(
                        self.nodes[a].value.data(),
                        g.data(),
                        &mut db,
                        k,
                        m,
                        n,
                        true,
                        false,
                    );
                    self.accumulate(grads, b, Tensor::new(vec![k, n], db));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let batch = sa[0];
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                let va = self.nodes[a].value.data();
                let vb = self.nodes[b].value.data();
                if self.nodes[a].requires_grad {
                    let mut da = vec![T::zero(); va.len()];
                    if !ta {
                        matmul::bmm(g.data(), vb, &mut da, batch, m, n, k, false, !tb);
                    } else {
                        matmul::bmm(vb, g.data(), &mut da, batch, k, n, m, tb, true);
                    }
                    self.accumulate(grads, a, Tensor::new(sa.clone(), da));
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![T::zero(); vb.len()];
                    if !tb {
                        matmul::bmm(va, g.data(), &mut db, batch, k, m, n, !ta, false);
                    } else {
                        matmul::bmm(g.data(), va, &mut db, batch, n, m, k, true, ta);
                    }
                    self.accumulate(grads, b, Tensor::new(sb, db));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let need_dx = self.nodes[x].requires_grad;
                let (dx, dw, db) = conv::conv2d_backward(
                    self.nodes[x].value.data(),
                    self.nodes[w].value.data(),
                    g.data(),
                    geom,
                    need_dx,
                );
                if let Some(dx) = dx {
                    self.accumulate(
                        grads,
                        x,
                        Tensor::new(self.nodes[x].value.shape().to_vec(), dx),
                    );
                }
                if self.nodes[w].requires_grad {
                    self.accumulate(
                        grads,
                        w,
                        Tensor::new(self.nodes[w].value.shape().to_vec(), dw),
                    );
                }
                if self.nodes[b].requires_grad {
                    self.accumulate(grads, b, Tensor::new(vec![geom.out_ch], db));
                }
            }
            Op::MaxPool { x, h, w, arg } => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let planes = shape[0] * shape[1];
                let dx = pool::maxpool2d_backward(g.data(), arg, planes, *h, *w);
                self.accumulate(grads, x, Tensor::new(shape, dx));
            }
            Op::AdaptiveAvgPool { x, h, w, oh, ow } => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let planes = shape[0] * shape[1];
                let dx = pool::adaptive_avgpool_backward(g.data(), planes, *h, *w, *oh, *ow);
                self.accumulate(grads, x, Tensor::new(shape, dx));
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (bsz, f) = {
                    let s = self.nodes[x].value.shape();
                    (s[0], s[1])
                };
                let o = self.nodes[w].value.shape()[0];
                if self.nodes[x].requires_grad {
                    let mut dx = vec![T::zero(); bsz * f];
                    matmul::matmul(
                        g.data(),
                        self.nodes[w].value.data(),
                        &mut dx,
                        bsz,
                        o,
                        f,
                        false,
                        false,
                    );
                    self.accumulate(grads, x, Tensor::new(vec![bsz, f], dx));
                }
                if self.nodes[w].requires_grad {
                    let mut dw = vec![T::zero(); o * f];
                    matmul::matmul(
                        g.data(),
                        self.nodes[x].value.data(),
                        &mut dw,
                        o,
                        bsz,
                        f,
                        true,
                        false,
                    );
                    self.accumulate(grads, w, Tensor::new(vec![o, f], dw));
                }
                if self.nodes[b].requires_grad {
                    self.accumulate(grads, b, reduce_to_shape(g, &[o]));
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                let back = g.reshaped(self.nodes[x].value.shape().to_vec())?;
                self.accumulate(grads, x, back);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let x = *x;
                let dx = softmax::softmax_backward(
                    self.nodes[i].value.data(),
                    g.data(),
                    *outer,
                    *len,
                    *inner,
                );
                self.accumulate(
                    grads,
                    x,
                    Tensor::new(self.nodes[x].value.shape().to_vec(), dx),
                );
            }
            Op::AttnCore { q, k, v, cq, c, n } => {
                let (q, k, v) = (*q, *k, *v);
                let batch = self.nodes[q].value.shape()[0];
                let (dq, dk, dv) = attention::attn_core_backward(
                    self.nodes[q].value.data(),
                    self.nodes[k].value.data(),
                    self.nodes[v].value.data(),
                    g.data(),
                    batch,
                    *cq,
                    *c,
                    *n,
                );
                self.accumulate(
                    grads,
                    q,
                    Tensor::new(self.nodes[q].value.shape().to_vec(), dq),
                );
                self.accumulate(
                    grads,
                    k,
                    Tensor::new(self.nodes[k].value.shape().to_vec(), dk),
                );
                self.accumulate(
                    grads,
                    v,
                    Tensor::new(self.nodes[v].value.shape().to_vec(), dv),
                );
            }
            Op::Sum(x) => {
                let x = *x;
                let gv = g.item();
                self.accumulate(
                    grads,
                    x,
                    Tensor::full(self.nodes[x].value.shape().to_vec(), gv),
                );
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                wsum,
            } => {
                let il = *logits;
                let classes = weights.len();
                let d = loss::weighted_ce_backward(
                    self.nodes[il].value.data(),
                    labels,
                    weights,
                    classes,
                    *wsum,
                    g.item(),
                );
                self.accumulate(
                    grads,
                    il,
                    Tensor::new(self.nodes[il].value.shape().to_vec(), d),
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_elementwise_values() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = t.input(Tensor::new(vec![2], vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        let r = t.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = t.relu(r).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_matches_element_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::<f64>::new();
        let va = t.input(Tensor::new(vec![2, 3], a.clone()));
        let vb = t.input(Tensor::new(vec![2, 3], b.clone()));
        let vc = t.mul(va, vb).unwrap();
        for i in 0..6 {
            assert_eq!(t.value(vc).data()[i], a[i] * b[i]);
        }
    }

    #[test]
    fn shape_mismatch_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Tensor::zeros(vec![2, 3]));
        let b = t.input(Tensor::zeros(vec![2, 2]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![3], vec![5.0, -2.0, 0.5]));
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let unused = t.param(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]));
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            t.backward(x),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_tensor_is_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let x1 = t1.input(Tensor::zeros(vec![2]));
        let x2 = t2.input(Tensor::zeros(vec![2]));
        assert!(matches!(t1.add(x1, x2), Err(Error::DetachedTensor)));
        assert!(matches!(t2.backward(x1), Err(Error::DetachedTensor)));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(l1 + l2) == grad(l1) + grad(l2)
        let x0 = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]);
        let combined = {
            let mut t = Tape::<f64>::new();
            let x = t.param(x0.clone());
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq).unwrap();
            let l2 = t.sum(x).unwrap();
            let both = t.add(l1, l2).unwrap();
            let g = t.backward(both).unwrap();
            g.get(x).unwrap().clone()
        };
        let separate: Vec<f64> = {
            let mut t = Tape::<f64>::new();
            let x = t.param(x0.clone());
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq).unwrap();
            let g1 = t.backward(l1).unwrap();
            let l2 = t.sum(x).unwrap();
            let g2 = t.backward(l2).unwrap();
            g1.get(x)
                .unwrap()
                .data()
                .iter()
                .zip(g2.get(x).unwrap().data())
                .map(|(a, b)| a + b)
                .collect()
        };
        for (c, s) in combined.data().iter().zip(&separate) {
            assert!((c - s).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_and_inner_dim_error() {
        let mut t = Tape::<f32>::new();
        let id = t.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let x = t.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = t.matmul(id, x).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
        let bad = t.input(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            t.matmul(id, bad),
            Err(Error::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_axis_validation() {
        let mut t = Tape::<f32>::new();
        let x = t.input(Tensor::zeros(vec![2, 4]));
        assert!(t.softmax(x, 1).is_ok());
        assert!(matches!(
            t.softmax(x, 2),
            Err(Error::InvalidAxis { .. })
        ));
    }
}
