//! Static computation graph for one model variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DecoderTarget, DenseBlockSpec, ModelConfig, SkipFusion, UpsampleMode};
use super::ModelError;
use crate::ops;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::Target;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input {
        slot: usize,
    },
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        kernel: [usize; 3],
    },
    UpConv {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
        factors: [usize; 3],
    },
    Swish(NodeId),
    Sigmoid(NodeId),
    MaxPool {
        input: NodeId,
        factors: [usize; 3],
    },
    Upsample {
        input: NodeId,
        factors: [usize; 3],
    },
    Concat(Vec<NodeId>),
    Multiply(NodeId, NodeId),
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::Conv { input, .. }
            | Op::UpConv { input, .. }
            | Op::MaxPool { input, .. }
            | Op::Upsample { input, .. } => vec![*input],
            Op::Swish(i) | Op::Sigmoid(i) => vec![*i],
            Op::Concat(v) => v.clone(),
            Op::Multiply(a, b) => vec![*a, *b],
        }
    }
}

/// Structural role of a node, used for shape recording and inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTag {
    /// Output of the pooling layer after encoder block `level`.
    EncoderPool { encoder: usize, level: usize },
    /// Output of encoder dense block `level` (the skip feature map).
    EncoderBlock { encoder: usize, level: usize },
    LatentFusion,
    /// Combination of several encoders' skips for decoder `decoder`.
    SkipFusion { decoder: usize, level: usize },
    Head { decoder: usize },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub channels: usize,
    pub tag: Option<NodeTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    /// `[out, positions, in]` for convolutions, `[positions, out, in]` for
    /// transposed convolutions, `[out]` for biases.
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
    pub values: Vec<T>,
}

/// Built model: graph, parameters and the config it came from.
#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    config: ModelConfig,
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    input_channels: Vec<usize>,
    heads: Vec<(NodeId, Vec<Target>)>,
    last_use: Vec<usize>,
    needs_grad: Vec<bool>,
}

/// Output of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// One tensor per decoder, `(head_channels, x, y, z)`.
    pub heads: Vec<Tensor<T>>,
    pub head_targets: Vec<Vec<Target>>,
    /// Spatial extent after each pooling layer, per encoder.
    pub pooled_shapes: Vec<Vec<[usize; 3]>>,
}

impl<T: Real> ModelOutput<T> {
    /// Single-channel probability map for `target`.
    pub fn target(&self, target: Target) -> Option<Tensor<T>> {
        self.heads
            .iter()
            .zip(&self.head_targets)
            .find_map(|(h, ts)| ts.iter().position(|t| *t == target).map(|c| h.select_channel(c)))
    }

    pub fn targets(&self) -> Vec<(Target, Tensor<T>)> {
        self.head_targets
            .iter()
            .flatten()
            .filter_map(|t| self.target(*t).map(|p| (*t, p)))
            .collect()
    }
}

/// Stored activations of a forward pass, consumed by [`ModelGraph::backward`].
pub struct Trace<T> {
    values: Vec<Option<Tensor<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    pub output: ModelOutput<T>,
}

/// Parameter gradients aligned with [`ModelGraph::params`].
pub type Gradients<T> = Vec<Vec<T>>;

struct Builder<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, op: Op, channels: usize) -> NodeId {
        self.nodes.push(Node {
            op,
            channels,
            tag: None,
        });
        self.nodes.len() - 1
    }

    fn tag(&mut self, id: NodeId, tag: NodeTag) {
        self.nodes[id].tag = Some(tag);
    }

    fn param(&mut self, name: String, shape: Vec<usize>, fan_in: usize, is_bias: bool) -> ParamId {
        let n = shape.iter().product();
        self.params.push(Param {
            name,
            shape,
            fan_in,
            is_bias,
            values: vec![T::zero(); n],
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, input: NodeId, out: usize, kernel: [usize; 3]) -> NodeId {
        let cin = self.nodes[input].channels;
        let positions: usize = kernel.iter().product();
        let weight = self.param(format!("{name}.weight"), vec![out, positions, cin], positions * cin, false);
        let bias = self.param(format!("{name}.bias"), vec![out], positions * cin, true);
        self.push(
            Op::Conv {
                input,
                weight,
                bias,
                kernel,
            },
            out,
        )
    }

    fn up_conv(&mut self, name: &str, input: NodeId, factors: [usize; 3]) -> NodeId {
        let c = self.nodes[input].channels;
        let positions: usize = factors.iter().product();
        let weight = self.param(format!("{name}.weight"), vec![positions, c, c], c, false);
        let bias = self.param(format!("{name}.bias"), vec![c], c, true);
        self.push(
            Op::UpConv {
                input,
                weight,
                bias,
                factors,
            },
            c,
        )
    }

    fn swish(&mut self, input: NodeId) -> NodeId {
        let c = self.nodes[input].channels;
        self.push(Op::Swish(input), c)
    }

    fn concat(&mut self, inputs: Vec<NodeId>) -> NodeId {
        if inputs.len() == 1 {
            return inputs[0];
        }
        let c = inputs.iter().map(|&i| self.nodes[i].channels).sum();
        self.push(Op::Concat(inputs), c)
    }

    /// Three (by default) densely connected conv+swish layers; the layer
    /// outputs are concatenated and compressed by a 1×1×1 convolution.
    fn dense_block(&mut self, name: &str, input: NodeId, spec: &DenseBlockSpec) -> NodeId {
        let mut outs = Vec::with_capacity(spec.n_layers);
        for j in 0..spec.n_layers {
            let mut feed = vec![input];
            feed.extend(&outs);
            let x = self.concat(feed);
            let c = self.conv(&format!("{name}.conv{j}"), x, spec.growth, spec.kernel);
            outs.push(self.swish(c));
        }
        let cat = self.concat(outs);
        self.conv(&format!("{name}.compress"), cat, spec.out_channels(), [1, 1, 1])
    }
}

impl<T: Real> ModelGraph<T> {
    /// Builds the graph described by `cfg`; all weights start at zero (see
    /// [`ModelGraph::init_weights`]).
    pub fn build(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = Builder::<T> {
            nodes: Vec::new(),
            params: Vec::new(),
        };
        let mut skips: Vec<Vec<NodeId>> = Vec::new();
        let mut bottlenecks = Vec::new();
        for (e, enc) in cfg.encoders.iter().enumerate() {
            let input = b.push(Op::Input { slot: e }, enc.inputs.len());
            let c = b.conv(&format!("enc{e}.init"), input, enc.initial_filters, [3, 3, 3]);
            let mut x = b.swish(c);
            let mut enc_skips = Vec::new();
            for (level, (block, pool)) in enc.blocks.iter().zip(&enc.pooling).enumerate() {
                let y = b.dense_block(&format!("enc{e}.block{level}"), x, block);
                b.tag(y, NodeTag::EncoderBlock { encoder: e, level });
                enc_skips.push(y);
                let ch = b.nodes[y].channels;
                x = b.push(
                    Op::MaxPool {
                        input: y,
                        factors: *pool,
                    },
                    ch,
                );
                b.tag(x, NodeTag::EncoderPool { encoder: e, level });
            }
            skips.push(enc_skips);
            bottlenecks.push(x);
        }
        let latent = if bottlenecks.len() > 1 {
            let l = b.concat(bottlenecks.clone());
            b.tag(l, NodeTag::LatentFusion);
            l
        } else {
            bottlenecks[0]
        };

        let pooling = &cfg.encoders[0].pooling;
        let levels = pooling.len();
        let mut heads = Vec::new();
        for (d, dec) in cfg.decoders.iter().enumerate() {
            let level_skips: Vec<NodeId> = match dec.target {
                DecoderTarget::SHARED if skips.len() > 1 => (0..levels)
                    .map(|level| {
                        let parts: Vec<NodeId> = skips.iter().map(|s| s[level]).collect();
                        let fused = match dec.skip_fusion {
                            SkipFusion::MultiplyExceptFirst if level > 0 => {
                                let ch = b.nodes[parts[0]].channels;
                                b.push(Op::Multiply(parts[0], parts[1]), ch)
                            }
                            _ => b.concat(parts),
                        };
                        b.tag(fused, NodeTag::SkipFusion { decoder: d, level });
                        fused
                    })
                    .collect(),
                DecoderTarget::SHARED => skips[0].clone(),
                DecoderTarget::T2 | DecoderTarget::PET => {
                    let target = dec.target.targets()[0];
                    let e = cfg.encoder_for(target).ok_or(ModelError::MissingEncoderFor(target))?;
                    skips[e].clone()
                }
            };
            let mut x = latent;
            for (i, level) in (0..levels).rev().enumerate() {
                let factors = pooling[level];
                let up = match dec.upsample {
                    UpsampleMode::Nearest => {
                        let ch = b.nodes[x].channels;
                        b.push(Op::Upsample { input: x, factors }, ch)
                    }
                    UpsampleMode::TransposedConv => b.up_conv(&format!("dec{d}.up{level}"), x, factors),
                };
                let cat = b.concat(vec![up, level_skips[level]]);
                x = b.dense_block(&format!("dec{d}.block{level}"), cat, &dec.blocks[i]);
            }
            let logits = b.conv(&format!("dec{d}.head"), x, dec.head_channels(), [1, 1, 1]);
            let ch = b.nodes[logits].channels;
            let head = b.push(Op::Sigmoid(logits), ch);
            b.tag(head, NodeTag::Head { decoder: d });
            heads.push((head, dec.target.targets()));
        }

        let n = b.nodes.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, node) in b.nodes.iter().enumerate() {
            for j in node.op.inputs() {
                last_use[j] = last_use[j].max(i);
            }
        }
        for (h, _) in &heads {
            last_use[*h] = usize::MAX;
        }
        let mut needs_grad = vec![false; n];
        for i in 0..n {
            needs_grad[i] = match &b.nodes[i].op {
                Op::Input { .. } => false,
                Op::Conv { .. } | Op::UpConv { .. } => true,
                op => op.inputs().iter().any(|&j| needs_grad[j]),
            };
        }
        Ok(ModelGraph {
            config: cfg.clone(),
            input_channels: cfg.encoders.iter().map(|e| e.inputs.len()).collect(),
            nodes: b.nodes,
            params: b.params,
            heads,
            last_use,
            needs_grad,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn input_channels(&self) -> &[usize] {
        &self.input_channels
    }

    /// Number of trainable scalars (kernels and biases).
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// He-normal kernels (`std = √(2 / fan_in)`), zero biases; reproducible
    /// per seed.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.is_bias {
                p.values.fill(T::zero());
                continue;
            }
            let std = (2.0 / p.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut p.values {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }

    /// All parameters flattened in graph order.
    pub fn flat_weights(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.values.iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[T]) -> Result<(), ModelError> {
        let expected = self.count_parameters();
        if flat.len() != expected {
            return Err(ModelError::WeightCount {
                expected,
                found: flat.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mutable access to the output convolution of decoder `decoder`
    /// as `(weight, bias)`.
    pub fn head_params_mut(&mut self, decoder: usize) -> Option<(&mut [T], &mut [T])> {
        let (head, _) = self.heads.get(decoder)?;
        let Op::Sigmoid(logits) = self.nodes[*head].op else {
            return None;
        };
        let Op::Conv { weight, bias, .. } = self.nodes[logits].op else {
            return None;
        };
        let (lo, hi) = self.params.split_at_mut(bias);
        Some((&mut lo[weight].values, &mut hi[0].values))
    }

    /// Checks input count, channels, agreement and divisibility.
    pub fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<[usize; 3], ModelError> {
        if inputs.len() != self.input_channels.len() {
            return Err(ModelError::InputCount {
                expected: self.input_channels.len(),
                found: inputs.len(),
            });
        }
        for (slot, (t, &c)) in inputs.iter().zip(&self.input_channels).enumerate() {
            if t.channels() != c {
                return Err(ModelError::InputChannels {
                    slot,
                    expected: c,
                    found: t.channels(),
                });
            }
        }
        let spatial = inputs[0].spatial();
        if inputs.iter().any(|t| t.spatial() != spatial) {
            return Err(ModelError::InputShape);
        }
        let factor = self.config.divisibility();
        for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            if spatial[a] == 0 || spatial[a] % factor[a] != 0 {
                return Err(ModelError::NotDivisible {
                    axis,
                    extent: spatial[a],
                    factor: factor[a],
                });
            }
        }
        Ok(spatial)
    }

    /// Evaluates the model, releasing intermediate activations as soon as
    /// they are no longer needed.
    pub fn forward(&self, inputs: &[Tensor<T>]) -> Result<ModelOutput<T>, ModelError> {
        Ok(self.run(inputs, false)?.output)
    }

    /// Evaluates the model keeping every activation for [`Self::backward`].
    pub fn forward_trace(&self, inputs: &[Tensor<T>]) -> Result<Trace<T>, ModelError> {
        self.run(inputs, true)
    }

    fn run(&self, inputs: &[Tensor<T>], keep: bool) -> Result<Trace<T>, ModelError> {
        self.check_inputs(inputs)?;
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut argmax: Vec<Option<Vec<u32>>> = vec![None; n];
        let mut pooled_shapes = vec![Vec::new(); self.input_channels.len()];
        for i in 0..n {
            let node = &self.nodes[i];
            let v = |j: NodeId| values[j].as_ref().expect("topological order");
            let out = match &node.op {
                Op::Input { slot } => inputs[*slot].clone(),
                Op::Conv {
                    input,
                    weight,
                    bias,
                    kernel,
                } => ops::conv3d_forward(
                    v(*input),
                    &self.params[*weight].values,
                    &self.params[*bias].values,
                    *kernel,
                    node.channels,
                ),
                Op::UpConv {
                    input,
                    weight,
                    bias,
                    factors,
                } => ops::up_conv_forward(
                    v(*input),
                    &self.params[*weight].values,
                    &self.params[*bias].values,
                    *factors,
                    node.channels,
                ),
                Op::Swish(j) => ops::swish_forward(v(*j)),
                Op::Sigmoid(j) => ops::sigmoid_forward(v(*j)),
                Op::MaxPool { input, factors } => {
                    let (y, arg) = ops::max_pool_forward(v(*input), *factors);
                    if keep {
                        argmax[i] = Some(arg);
                    }
                    y
                }
                Op::Upsample { input, factors } => ops::upsample_forward(v(*input), *factors),
                Op::Concat(parts) => {
                    let ts: Vec<&Tensor<T>> = parts.iter().map(|&j| v(j)).collect();
                    ops::concat_forward(&ts)
                }
                Op::Multiply(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    assert_eq!(ta.shape(), tb.shape(), "multiplicative fusion of mismatched shapes");
                    let mut y = ta.clone();
                    for (o, &w) in y.data_mut().iter_mut().zip(tb.data()) {
                        *o *= w;
                    }
                    y
                }
            };
            if let Some(NodeTag::EncoderPool { encoder, .. }) = node.tag {
                pooled_shapes[encoder].push(out.spatial());
            }
            values[i] = Some(out);
            if !keep {
                for j in node.op.inputs() {
                    if self.last_use[j] == i {
                        values[j] = None;
                    }
                }
            }
        }
        let heads = self
            .heads
            .iter()
            .map(|(h, _)| values[*h].clone().expect("head evaluated"))
            .collect();
        Ok(Trace {
            values,
            argmax,
            output: ModelOutput {
                heads,
                head_targets: self.heads.iter().map(|(_, t)| t.clone()).collect(),
                pooled_shapes,
            },
        })
    }

    /// Reverse-mode pass: given `∂L/∂head` for every head, returns `∂L/∂θ`
    /// for every parameter.
    pub fn backward(&self, trace: &Trace<T>, head_grads: &[Tensor<T>]) -> Gradients<T> {
        assert_eq!(head_grads.len(), self.heads.len());
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for ((h, _), g) in self.heads.iter().zip(head_grads) {
            grads[*h] = Some(g.clone());
        }
        let mut pgrads: Gradients<T> = self.params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();
        let value = |j: NodeId| trace.values[j].as_ref().expect("trace keeps all values");
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let input_grad = |j: NodeId, grads: &mut Vec<Option<Tensor<T>>>| -> Option<Tensor<T>> {
                if !self.needs_grad[j] {
                    return None;
                }
                Some(grads[j].take().unwrap_or_else(|| {
                    let t = value(j);
                    Tensor::zeros(t.channels(), t.spatial())
                }))
            };
            match &node.op {
                Op::Input { .. } => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    kernel,
                } => {
                    let mut gi = input_grad(*input, &mut grads);
                    let (gw, gb) = split_two(&mut pgrads, *weight, *bias);
                    ops::conv3d_backward(
                        value(*input),
                        &self.params[*weight].values,
                        *kernel,
                        node.channels,
                        &g,
                        gw,
                        gb,
                        gi.as_mut(),
                    );
                    if gi.is_some() {
                        grads[*input] = gi;
                    }
                }
                Op::UpConv {
                    input,
                    weight,
                    bias,
                    factors,
                } => {
                    let mut gi = input_grad(*input, &mut grads);
                    let (gw, gb) = split_two(&mut pgrads, *weight, *bias);
                    ops::up_conv_backward(
                        value(*input),
                        &self.params[*weight].values,
                        *factors,
                        node.channels,
                        &g,
                        gw,
                        gb,
                        gi.as_mut(),
                    );
                    if gi.is_some() {
                        grads[*input] = gi;
                    }
                }
                Op::Swish(j) => {
                    if let Some(mut gi) = input_grad(*j, &mut grads) {
                        ops::swish_backward(value(*j), &g, &mut gi);
                        grads[*j] = Some(gi);
                    }
                }
                Op::Sigmoid(j) => {
                    if let Some(mut gi) = input_grad(*j, &mut grads) {
                        ops::sigmoid_backward(value(i), &g, &mut gi);
                        grads[*j] = Some(gi);
                    }
                }
                Op::MaxPool { input, .. } => {
                    if let Some(mut gi) = input_grad(*input, &mut grads) {
                        let arg = trace.argmax[i].as_ref().expect("argmax kept in trace");
                        ops::max_pool_backward(&g, arg, &mut gi);
                        grads[*input] = Some(gi);
                    }
                }
                Op::Upsample { input, factors } => {
                    if let Some(mut gi) = input_grad(*input, &mut grads) {
                        ops::upsample_backward(&g, *factors, &mut gi);
                        grads[*input] = Some(gi);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &j in parts {
                        let len = value(j).len();
                        if let Some(mut gi) = input_grad(j, &mut grads) {
                            for (a, &b) in gi.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                                *a += b;
                            }
                            grads[j] = Some(gi);
                        }
                        offset += len;
                    }
                }
                Op::Multiply(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    if let Some(mut ga) = input_grad(*a, &mut grads) {
                        for ((o, &gv), &w) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                            *o += gv * w;
                        }
                        grads[*a] = Some(ga);
                    }
                    if let Some(mut gb) = input_grad(*b, &mut grads) {
                        for ((o, &gv), &w) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                            *o += gv * w;
                        }
                        grads[*b] = Some(gb);
                    }
                }
            }
        }
        pgrads
    }
}

fn split_two<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
