//! The 21-row classifier stack: five conv+resblock+pool groups (two with
//! trailing self-attention), adaptive 3x3 average pooling, and a two-layer
//! head onto 4 classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, ResBlockVars, SelfAttentionVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const BASE_HIDDEN: usize = 1024;
pub const ADAPTIVE_OUT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    ResBlock,
    MaxPool2d,
    SelfAttention,
    AdaptiveAvgPool2d,
    Linear,
}

/// Declarative description of one layer in the stack.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Named parameter storage. Order is fixed at build time and shared with
/// the optimizer, gradients, and checkpoints.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// One layer with its parameter indices into the [`ParamSet`].
#[derive(Debug, Clone)]
enum LayerDef {
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        padding: usize,
    },
    Res {
        w1: usize,
        b1: usize,
        w2: usize,
        b2: usize,
    },
    Pool {
        k: usize,
        s: usize,
    },
    Attn {
        qw: usize,
        qb: usize,
        kw: usize,
        kb: usize,
        vw: usize,
        vb: usize,
        gamma: usize,
    },
    Adaptive {
        oh: usize,
        ow: usize,
    },
    Fc {
        w: usize,
        b: usize,
        relu_after: bool,
    },
}

pub struct Model {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerDef>,
    params: ParamSet,
    channels: [usize; 5],
    hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCensus {
    pub conv: usize,
    pub pool: usize,
    pub resblock: usize,
    pub attention: usize,
    pub linear: usize,
    pub adaptive_pool: usize,
}

/// Per-layer entry of the analytic shape trace.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub h: usize,
    pub w: usize,
}

/// Result of a forward pass: the logits plus the tape handles of every
/// parameter, aligned with the model's parameter order.
pub struct ForwardPass {
    pub logits: Var,
    pub param_vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Register parameters as gradient leaves (training) or plain inputs.
    pub trainable: bool,
    /// Skip the attention blocks entirely, leaving the residual path.
    pub ablate_attention: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts {
            trainable: false,
            ablate_attention: false,
        }
    }
}

/// Round to the nearest multiple of 8 (minimum 8) so attention query/key
/// projections keep an integral channel count at any width multiplier.
fn scale_channels(base: usize, width_mult: f64) -> usize {
    let raw = (base as f64 * width_mult).round() as i64;
    let snapped = ((raw + 4) / 8) * 8;
    (snapped.max(8)) as usize
}

/// Ordered layer descriptions for given channel widths: the five
/// conv/res/pool groups with attention after groups 1 and 4, the adaptive
/// pool, and the two-layer head.
pub fn architecture(channels: [usize; 5], hidden: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut in_ch = 3usize;
    for (i, &c) in channels.iter().enumerate() {
        specs.push(LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels: in_ch,
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        specs.push(LayerSpec {
            kind: LayerKind::ResBlock,
            in_channels: c,
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        specs.push(LayerSpec {
            kind: LayerKind::MaxPool2d,
            in_channels: c,
            out_channels: c,
            kernel: 2,
            stride: 2,
            padding: 0,
        });
        if i == 0 || i == 3 {
            specs.push(LayerSpec {
                kind: LayerKind::SelfAttention,
                in_channels: c,
                out_channels: c,
                kernel: 1,
                stride: 1,
                padding: 0,
            });
        }
        in_ch = c;
    }
    specs.push(LayerSpec {
        kind: LayerKind::AdaptiveAvgPool2d,
        in_channels: in_ch,
        out_channels: in_ch,
        kernel: ADAPTIVE_OUT,
        stride: 0,
        padding: 0,
    });
    let feat = in_ch * ADAPTIVE_OUT * ADAPTIVE_OUT;
    specs.push(LayerSpec {
        kind: LayerKind::Linear,
        in_channels: feat,
        out_channels: hidden,
        kernel: 0,
        stride: 0,
        padding: 0,
    });
    specs.push(LayerSpec {
        kind: LayerKind::Linear,
        in_channels: hidden,
        out_channels: NUM_CLASSES,
        kernel: 0,
        stride: 0,
        padding: 0,
    });
    specs
}

/// Build the full-width stack with seeded fan-in-scaled initialization.
pub fn build_ctsar_cnn(seed: u64) -> Model {
    Model::build(1.0, seed)
}

impl Model {
    /// Build at a channel-width multiplier (1.0 = the reference table).
    pub fn build(width_mult: f64, seed: u64) -> Model {
        let channels = [
            scale_channels(BASE_CHANNELS[0], width_mult),
            scale_channels(BASE_CHANNELS[1], width_mult),
            scale_channels(BASE_CHANNELS[2], width_mult),
            scale_channels(BASE_CHANNELS[3], width_mult),
            scale_channels(BASE_CHANNELS[4], width_mult),
        ];
        let hidden = scale_channels(BASE_HIDDEN, width_mult);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::from_channels(channels, hidden, &mut rng)
    }

    fn from_channels(channels: [usize; 5], hidden: usize, rng: &mut ChaCha8Rng) -> Model {
        let specs = architecture(channels, hidden);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut block = 0usize;

        let conv_init = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out_c: usize, in_c: usize, k: usize| {
            let fan_in = in_c * k * k;
            let w = params.add(
                format!("{name}.weight"),
                Tensor::randn_scaled(vec![out_c, in_c, k, k], fan_in, rng),
            );
            let b = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_c]));
            (w, b)
        };

        for spec in &specs {
            match spec.kind {
                LayerKind::Conv2d => {
                    block += 1;
                    let name = format!("block{block}.conv");
                    let (w, b) = conv_init(
                        &mut params,
                        rng,
                        &name,
                        spec.out_channels,
                        spec.in_channels,
                        3,
                    );
                    layers.push(LayerDef::Conv {
                        w,
                        b,
                        stride: spec.stride,
                        padding: spec.padding,
                    });
                }
                LayerKind::ResBlock => {
                    let c = spec.out_channels;
                    let (w1, b1) =
                        conv_init(&mut params, rng, &format!("block{block}.res.conv1"), c, c, 3);
                    let (w2, b2) =
                        conv_init(&mut params, rng, &format!("block{block}.res.conv2"), c, c, 3);
                    layers.push(LayerDef::Res { w1, b1, w2, b2 });
                }
                LayerKind::MaxPool2d => layers.push(LayerDef::Pool {
                    k: spec.kernel,
                    s: spec.stride,
                }),
                LayerKind::SelfAttention => {
                    let c = spec.out_channels;
                    let cq = c / 8;
                    let (qw, qb) =
                        conv_init(&mut params, rng, &format!("block{block}.attn.q"), cq, c, 1);
                    let (kw, kb) =
                        conv_init(&mut params, rng, &format!("block{block}.attn.k"), cq, c, 1);
                    let (vw, vb) =
                        conv_init(&mut params, rng, &format!("block{block}.attn.v"), c, c, 1);
                    let gamma =
                        params.add(format!("block{block}.attn.gamma"), Tensor::zeros(vec![1]));
                    layers.push(LayerDef::Attn {
                        qw,
                        qb,
                        kw,
                        kb,
                        vw,
                        vb,
                        gamma,
                    });
                }
                LayerKind::AdaptiveAvgPool2d => layers.push(LayerDef::Adaptive {
                    oh: ADAPTIVE_OUT,
                    ow: ADAPTIVE_OUT,
                }),
                LayerKind::Linear => {
                    let fc_index = layers
                        .iter()
                        .filter(|l| matches!(l, LayerDef::Fc { .. }))
                        .count()
                        + 1;
                    let name = format!("head.fc{fc_index}");
                    let w = params.add(
                        format!("{name}.weight"),
                        Tensor::randn_scaled(
                            vec![spec.out_channels, spec.in_channels],
                            spec.in_channels,
                            rng,
                        ),
                    );
                    let b = params.add(
                        format!("{name}.bias"),
                        Tensor::zeros(vec![spec.out_channels]),
                    );
                    layers.push(LayerDef::Fc {
                        w,
                        b,
                        relu_after: fc_index == 1,
                    });
                }
            }
        }

        Model {
            specs,
            layers,
            params,
            channels,
            hidden,
        }
    }

    /// Rebuild a model around a loaded parameter set, deriving the channel
    /// widths from the stored weight shapes.
    pub fn from_param_set(params: ParamSet) -> Result<Model> {
        let channel = |name: &str| -> Result<usize> {
            params
                .by_name(name)
                .map(|t| t.shape()[0])
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{name}`")))
        };
        let channels = [
            channel("block1.conv.weight")?,
            channel("block2.conv.weight")?,
            channel("block3.conv.weight")?,
            channel("block4.conv.weight")?,
            channel("block5.conv.weight")?,
        ];
        let hidden = channel("head.fc1.weight")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::from_channels(channels, hidden, &mut rng);
        // overwrite the fresh init with the stored tensors, validating
        // names and shapes
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let loaded = params
                .by_name(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{name}`")))?;
            if loaded.shape() != model.params.tensor(i).shape() {
                return Err(Error::ShapeMismatch {
                    lhs: loaded.shape().to_vec(),
                    rhs: model.params.tensor(i).shape().to_vec(),
                });
            }
            *model.params.tensor_mut(i) = loaded.clone();
        }
        if params.len() != model.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    pub fn census(&self) -> LayerCensus {
        let mut c = LayerCensus {
            conv: 0,
            pool: 0,
            resblock: 0,
            attention: 0,
            linear: 0,
            adaptive_pool: 0,
        };
        for s in &self.specs {
            match s.kind {
                LayerKind::Conv2d => c.conv += 1,
                LayerKind::MaxPool2d => c.pool += 1,
                LayerKind::ResBlock => c.resblock += 1,
                LayerKind::SelfAttention => c.attention += 1,
                LayerKind::Linear => c.linear += 1,
                LayerKind::AdaptiveAvgPool2d => c.adaptive_pool += 1,
            }
        }
        c
    }

    /// Analytic shape propagation for an input of `h` x `w` pixels.
    /// Linear entries report features in `out_channels` with h = w = 0.
    pub fn shape_trace(&self, mut h: usize, mut w: usize) -> Vec<TraceEntry> {
        let mut out = Vec::with_capacity(self.specs.len());
        for s in &self.specs {
            match s.kind {
                LayerKind::Conv2d | LayerKind::ResBlock | LayerKind::SelfAttention => {}
                LayerKind::MaxPool2d => {
                    h = (h - s.kernel) / s.stride + 1;
                    w = (w - s.kernel) / s.stride + 1;
                }
                LayerKind::AdaptiveAvgPool2d => {
                    h = s.kernel;
                    w = s.kernel;
                }
                LayerKind::Linear => {
                    out.push(TraceEntry {
                        kind: s.kind,
                        out_channels: s.out_channels,
                        h: 0,
                        w: 0,
                    });
                    continue;
                }
            }
            out.push(TraceEntry {
                kind: s.kind,
                out_channels: s.out_channels,
                h,
                w,
            });
        }
        out
    }

    /// Run the stack on a [B,3,H,W] input already on the tape.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, opts: ForwardOpts) -> Result<ForwardPass> {
        let param_vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if opts.trainable {
                    tape.param(t.clone())
                } else {
                    tape.input(t.clone())
                }
            })
            .collect();
        let p = &param_vars;
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                LayerDef::Conv {
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let c = tape.conv2d(cur, p[*w], p[*b], *stride, *padding)?;
                    tape.relu(c)?
                }
                LayerDef::Res { w1, b1, w2, b2 } => layers::resblock(
                    tape,
                    cur,
                    &ResBlockVars {
                        conv1_weight: p[*w1],
                        conv1_bias: p[*b1],
                        conv2_weight: p[*w2],
                        conv2_bias: p[*b2],
                    },
                )?,
                LayerDef::Pool { k, s } => tape.maxpool2d(cur, *k, *s)?,
                LayerDef::Attn {
                    qw,
                    qb,
                    kw,
                    kb,
                    vw,
                    vb,
                    gamma,
                } => {
                    if opts.ablate_attention {
                        cur
                    } else {
                        layers::self_attention(
                            tape,
                            cur,
                            &SelfAttentionVars {
                                q_weight: p[*qw],
                                q_bias: p[*qb],
                                k_weight: p[*kw],
                                k_bias: p[*kb],
                                v_weight: p[*vw],
                                v_bias: p[*vb],
                                gamma: p[*gamma],
                            },
                        )?
                    }
                }
                LayerDef::Adaptive { oh, ow } => tape.adaptive_avgpool2d(cur, *oh, *ow)?,
                LayerDef::Fc { w, b, relu_after } => {
                    let shape = tape.value(cur).shape().to_vec();
                    if shape.len() == 4 {
                        let flat = shape[1] * shape[2] * shape[3];
                        cur = tape.reshape(cur, vec![shape[0], flat])?;
                    }
                    let y = tape.linear(cur, p[*w], p[*b])?;
                    if *relu_after {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(ForwardPass {
            logits: cur,
            param_vars,
        })
    }

    /// Forward-only logits for a batch tensor, chunked to bound activation
    /// memory at full width.
    pub fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = input.shape().to_vec();
        let batch = shape[0];
        let per = input.numel() / batch;
        const CHUNK: usize = 4;
        let mut out = Vec::with_capacity(batch * NUM_CLASSES);
        for start in (0..batch).step_by(CHUNK) {
            let end = (start + CHUNK).min(batch);
            let mut chunk_shape = shape.clone();
            chunk_shape[0] = end - start;
            let chunk = Tensor::new(
                chunk_shape,
                input.data()[start * per..end * per].to_vec(),
            );
            let mut tape = Tape::new();
            let x = tape.input(chunk);
            let fp = self.forward(&mut tape, x, ForwardOpts::default())?;
            out.extend_from_slice(tape.value(fp.logits).data());
        }
        Ok(Tensor::new(vec![batch, NUM_CLASSES], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_matches_the_published_counts() {
        let m = Model::build(0.125, 0);
        let c = m.census();
        assert_eq!(
            c,
            LayerCensus {
                conv: 5,
                pool: 5,
                resblock: 5,
                attention: 2,
                linear: 2,
                adaptive_pool: 1
            }
        );
        assert_eq!(m.specs().len(), 20);
    }

    #[test]
    fn width_scaling_snaps_to_multiples_of_eight() {
        assert_eq!(scale_channels(64, 1.0), 64);
        assert_eq!(scale_channels(64, 0.25), 16);
        assert_eq!(scale_channels(512, 0.25), 128);
        assert_eq!(scale_channels(64, 0.01), 8);
        assert_eq!(scale_channels(1024, 0.25), 256);
    }

    #[test]
    fn full_width_shape_trace_hits_the_published_spatial_sequence() {
        let m = build_ctsar_cnn(1);
        assert_eq!(m.channels(), [64, 128, 256, 512, 512]);
        assert_eq!(m.hidden(), 1024);
        let trace = m.shape_trace(224, 224);
        let spatial: Vec<usize> = trace
            .iter()
            .filter(|t| matches!(t.kind, LayerKind::MaxPool2d | LayerKind::AdaptiveAvgPool2d))
            .map(|t| t.h)
            .collect();
        assert_eq!(spatial, vec![112, 56, 28, 14, 7, 3]);
    }

    #[test]
    fn parameter_names_follow_the_checkpoint_convention() {
        let m = Model::build(0.125, 3);
        let names: Vec<&str> = m.params().iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"block1.conv.weight"));
        assert!(names.contains(&"block1.res.conv1.weight"));
        assert!(names.contains(&"block1.attn.q.weight"));
        assert!(names.contains(&"block1.attn.gamma"));
        assert!(names.contains(&"block4.attn.v.bias"));
        assert!(names.contains(&"block5.res.conv2.bias"));
        assert!(names.contains(&"head.fc1.weight"));
        assert!(names.contains(&"head.fc2.bias"));
    }

    #[test]
    fn small_forward_produces_finite_4_logits() {
        let m = Model::build(0.125, 7);
        // 96 is the smallest extent that still leaves 3x3 after 5 pools
        let x = Tensor::zeros(vec![2, 3, 96, 96]);
        let logits = m.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.all_finite());
    }

    #[test]
    fn forward_shapes_match_the_analytic_trace() {
        let m = Model::build(0.125, 9);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![1, 3, 96, 96]));
        let fp = m.forward(&mut tape, x, ForwardOpts::default()).unwrap();
        assert_eq!(tape.value(fp.logits).shape(), &[1, 4]);
        let trace = m.shape_trace(96, 96);
        let pools: Vec<usize> = trace
            .iter()
            .filter(|t| matches!(t.kind, LayerKind::MaxPool2d))
            .map(|t| t.h)
            .collect();
        assert_eq!(pools, vec![48, 24, 12, 6, 3]);
    }

    #[test]
    fn rebuild_from_param_set_round_trips() {
        let m = Model::build(0.125, 11);
        let m2 = Model::from_param_set(m.params().clone()).unwrap();
        assert_eq!(m.channels(), m2.channels());
        for i in 0..m.params().len() {
            assert_eq!(m.params().tensor(i).data(), m2.params().tensor(i).data());
        }
    }
}
