//! Layer-level forward compositions over the tape: residual blocks and
//! spatial self-attention. Plain conv/pool/linear layers are tape ops
//! directly; these two compose several ops and are shared by the model,
//! the gradient checker, and the tests.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Parameter handles for one residual block: two 3x3 convolutions with
/// identity skip, y = relu(x + conv2(relu(conv1(x)))).
#[derive(Debug, Clone, Copy)]
pub struct ResBlockVars {
    pub conv1_weight: Var,
    pub conv1_bias: Var,
    pub conv2_weight: Var,
    pub conv2_bias: Var,
}

pub fn resblock<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ResBlockVars) -> Result<Var> {
    let h = tape.conv2d(x, p.conv1_weight, p.conv1_bias, 1, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, p.conv2_weight, p.conv2_bias, 1, 1)?;
    let s = tape.add(x, h)?;
    tape.relu(s)
}

/// Parameter handles for one self-attention block: 1x1 query/key
/// projections to C/8 channels, a 1x1 value projection to C channels, and
/// a learned residual scale gamma (a single value, zero at init so the
/// block starts as an exact identity).
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionVars {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
    pub gamma: Var,
}

pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &SelfAttentionVars,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c % 8 != 0 {
        return Err(Error::ChannelsNotDivisible(c));
    }
    let n = h * w;
    let q = tape.conv2d(x, p.q_weight, p.q_bias, 1, 0)?;
    let cq = tape.value(q).shape()[1];
    let q = tape.reshape(q, vec![b, cq, n])?;
    let k = tape.conv2d(x, p.k_weight, p.k_bias, 1, 0)?;
    let k = tape.reshape(k, vec![b, cq, n])?;
    let v = tape.conv2d(x, p.v_weight, p.v_bias, 1, 0)?;
    let v = tape.reshape(v, vec![b, c, n])?;
    let o = tape.attn_core(q, k, v)?;
    let o = tape.reshape(o, vec![b, c, h, w])?;
    let scaled = tape.mul(o, p.gamma)?;
    tape.add(x, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, rng)
    }

    #[test]
    fn resblock_with_zero_branch_is_relu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let x0 = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let x = t.input(x0.clone());
        let p = ResBlockVars {
            conv1_weight: t.param(Tensor::zeros(vec![3, 3, 3, 3])),
            conv1_bias: t.param(Tensor::zeros(vec![3])),
            conv2_weight: t.param(Tensor::zeros(vec![3, 3, 3, 3])),
            conv2_bias: t.param(Tensor::zeros(vec![3])),
        };
        let y = resblock(&mut t, x, &p).unwrap();
        for (yv, xv) in t.value(y).data().iter().zip(x0.data()) {
            assert_eq!(*yv, xv.max(0.0));
        }
    }

    #[test]
    fn resblock_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (b, c, h, w) in [(1, 4, 5, 5), (2, 2, 3, 7)] {
            let mut t = Tape::<f64>::new();
            let x = t.input(rand_tensor(&mut rng, &[b, c, h, w]));
            let p = ResBlockVars {
                conv1_weight: t.param(rand_tensor(&mut rng, &[c, c, 3, 3])),
                conv1_bias: t.param(rand_tensor(&mut rng, &[c])),
                conv2_weight: t.param(rand_tensor(&mut rng, &[c, c, 3, 3])),
                conv2_bias: t.param(rand_tensor(&mut rng, &[c])),
            };
            let y = resblock(&mut t, x, &p).unwrap();
            assert_eq!(t.value(y).shape(), &[b, c, h, w]);
        }
    }

    /// Composition oracle: the resblock must equal chaining the already
    /// verified conv/relu/add ops by hand.
    #[test]
    fn resblock_matches_composition_of_verified_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, c, h, w) = (1, 4, 5, 5);
        let x0 = rand_tensor(&mut rng, &[b, c, h, w]);
        let w1 = rand_tensor(&mut rng, &[c, c, 3, 3]);
        let b1 = rand_tensor(&mut rng, &[c]);
        let w2 = rand_tensor(&mut rng, &[c, c, 3, 3]);
        let b2 = rand_tensor(&mut rng, &[c]);

        let mut t = Tape::<f64>::new();
        let x = t.input(x0.clone());
        let p = ResBlockVars {
            conv1_weight: t.param(w1.clone()),
            conv1_bias: t.param(b1.clone()),
            conv2_weight: t.param(w2.clone()),
            conv2_bias: t.param(b2.clone()),
        };
        let y = resblock(&mut t, x, &p).unwrap();

        let mut t2 = Tape::<f64>::new();
        let x2 = t2.input(x0.clone());
        let (w1v, b1v) = (t2.input(w1), t2.input(b1));
        let (w2v, b2v) = (t2.input(w2), t2.input(b2));
        let h1 = t2.conv2d(x2, w1v, b1v, 1, 1).unwrap();
        let h1 = t2.relu(h1).unwrap();
        let h2 = t2.conv2d(h1, w2v, b2v, 1, 1).unwrap();
        let s = t2.add(x2, h2).unwrap();
        let want = t2.relu(s).unwrap();

        assert_eq!(t.value(y).data(), t2.value(want).data());
    }

    fn attention_params(t: &mut Tape<f64>, rng: &mut ChaCha8Rng, c: usize) -> SelfAttentionVars {
        let cq = c / 8;
        SelfAttentionVars {
            q_weight: t.param(rand_tensor(rng, &[cq, c, 1, 1])),
            q_bias: t.param(rand_tensor(rng, &[cq])),
            k_weight: t.param(rand_tensor(rng, &[cq, c, 1, 1])),
            k_bias: t.param(rand_tensor(rng, &[cq])),
            v_weight: t.param(rand_tensor(rng, &[c, c, 1, 1])),
            v_bias: t.param(rand_tensor(rng, &[c])),
            gamma: t.param(Tensor::zeros(vec![1])),
        }
    }

    #[test]
    fn attention_with_zero_gamma_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::<f64>::new();
        let x0 = rand_tensor(&mut rng, &[2, 8, 3, 3]);
        let x = t.input(x0.clone());
        let p = attention_params(&mut t, &mut rng, 8);
        let y = self_attention(&mut t, x, &p).unwrap();
        assert_eq!(t.value(y).data(), x0.data());
    }

    #[test]
    fn attention_rejects_indivisible_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f64>::new();
        let x = t.input(rand_tensor(&mut rng, &[1, 6, 2, 2]));
        let p = attention_params(&mut t, &mut rng, 8);
        assert!(matches!(
            self_attention(&mut t, x, &p),
            Err(Error::ChannelsNotDivisible(6))
        ));
    }

    /// Dense-matrix oracle with explicit loops for a 1x8x2x2 input.
    #[test]
    fn attention_matches_dense_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, h, w) = (8, 2, 2);
        let n = h * w;
        let cq = c / 8;
        let x0 = rand_tensor(&mut rng, &[1, c, h, w]);

        let mut t = Tape::<f64>::new();
        let x = t.input(x0.clone());
        let mut p = attention_params(&mut t, &mut rng, c);
        let gamma = 0.7;
        p.gamma = t.param(Tensor::new(vec![1], vec![gamma]));
        let y = self_attention(&mut t, x, &p).unwrap();

        // oracle: 1x1 convs are per-position matvecs
        let proj = |wt: &Tensor<f64>, bt: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * n];
            for r in 0..rows {
                for pix in 0..n {
                    let mut s = bt.data()[r];
                    for ch in 0..c {
                        s += wt.data()[r * c + ch] * x0.data()[ch * n + pix];
                    }
                    out[r * n + pix] = s;
                }
            }
            out
        };
        let qw = t.value(p.q_weight).clone();
        let qb = t.value(p.q_bias).clone();
        let kw = t.value(p.k_weight).clone();
        let kb = t.value(p.k_bias).clone();
        let vw = t.value(p.v_weight).clone();
        let vb = t.value(p.v_bias).clone();
        let q = proj(&qw, &qb, cq);
        let k = proj(&kw, &kb, cq);
        let v = proj(&vw, &vb, c);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for ch in 0..cq {
                    s += q[ch * n + i] * k[ch * n + j];
                }
                a[i * n + j] = s;
            }
        }
        for i in 0..n {
            let row = &mut a[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
            for s in row.iter_mut() {
                *s = (*s - max).exp() / z;
            }
        }
        let mut want = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += v[ch * n + j] * a[i * n + j];
                }
                want[ch * n + i] = x0.data()[ch * n + i] + gamma * s;
            }
        }
        for (got, wv) in t.value(y).data().iter().zip(&want) {
            assert!((got - wv).abs() < 1e-12, "{got} vs {wv}");
        }
    }
}
