//! Executable models built from an [`ArchSpec`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ArchSpec, AttentionKind, LayerSpec, CLASSES, INPUT_CHANNELS, INPUT_SIZE};
use crate::attention::{
    gate_and_scale, gate_and_scale_bwd, scale_channels, CLocalCache, CLocalParams, ChannelGate, SECache, SEParams,
};
use crate::error::{shape_err, Error, Result};
use crate::ops::{
    batchnorm_infer, batchnorm_infer_bwd, batchnorm_train, batchnorm_train_bwd, conv2d_bwd, conv2d_fwd, dense_bwd,
    dense_fwd, global_avg_pool, global_avg_pool_bwd, maxpool2x2, maxpool2x2_bwd, relu, relu_bwd, BatchNormCache,
    BatchNormParams, ConvParams, DenseParams, Mode, Padding,
};
use crate::params::{Param, ParamMut, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub enum Attention<T> {
    Se(SEParams<T>),
    CLocal(CLocalParams<T>),
}

impl<T: Scalar> Attention<T> {
    fn zeros_like(&self) -> Self {
        match self {
            Attention::Se(p) => Attention::Se(p.zeros_like()),
            Attention::CLocal(p) => Attention::CLocal(p.zeros_like()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Attention::Se(p) => p.param_count(),
            Attention::CLocal(p) => p.param_count(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Attention<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        match self {
            Attention::Se(p) => p.params(),
            Attention::CLocal(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        match self {
            Attention::Se(p) => p.params_mut(),
            Attention::CLocal(p) => p.params_mut(),
        }
    }
}

/// conv → (BN) → (ReLU)
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Conv {
        name: String,
        unit: ConvUnit<T>,
        attention: Option<Attention<T>>,
    },
    MaxPool,
    Bottleneck {
        name: String,
        branch: [ConvUnit<T>; 3],
        shortcut: Option<ConvUnit<T>>,
        attention: Option<Attention<T>>,
    },
    GlobalAvgPool,
    Dense {
        name: String,
        params: DenseParams<T>,
    },
}

enum BnRecord<T> {
    Train(BatchNormCache<T>),
    Infer(Tensor4<T>),
}

struct UnitRecord<T> {
    input: Tensor4<T>,
    bn: Option<BnRecord<T>>,
    /// Pre-activation, kept only when the unit applies ReLU.
    pre_relu: Option<Tensor4<T>>,
}

enum AttRecord<T> {
    Override(T),
    Se {
        input: Tensor4<T>,
        pre: Tensor4<T>,
        cache: SECache<T>,
    },
    CLocal {
        input: Tensor4<T>,
        pre: Tensor4<T>,
        cache: CLocalCache<T>,
    },
}

enum NodeRecord<T> {
    Conv {
        unit: UnitRecord<T>,
        att: Option<AttRecord<T>>,
    },
    MaxPool {
        shape: Shape4,
        argmax: Vec<usize>,
    },
    Bottleneck {
        branch: Vec<UnitRecord<T>>,
        shortcut: Option<UnitRecord<T>>,
        att: Option<AttRecord<T>>,
        sum: Tensor4<T>,
    },
    Gap {
        shape: Shape4,
    },
    Dense {
        input: Tensor4<T>,
    },
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct Tape<T> {
    records: Vec<NodeRecord<T>>,
    /// Updated `(running_mean, running_var)` per BN layer, in visiting order.
    bn_updates: Vec<(Vec<T>, Vec<T>)>,
}

/// Parameter gradients, laid out exactly like the model they came from.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn named_params(&self) -> Vec<(String, Param<'_, T>)> {
        collect_params(&self.nodes)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamMut<'_, T>)> {
        collect_params_mut(&mut self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ArchSpec,
    nodes: Vec<Node<T>>,
    gate_override: Option<T>,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325 ^ seed, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn he_normal<T: Scalar>(len: usize, fan_in: usize, seed: u64, name: &str) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
    (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
}

fn conv_unit<T: Scalar>(
    name: &str,
    in_c: usize,
    out: usize,
    kernel: usize,
    stride: usize,
    bn_relu: (bool, bool),
    seed: u64,
) -> Result<ConvUnit<T>> {
    let shape = Shape4::new(out, in_c, kernel, kernel);
    let w = he_normal(shape.len(), in_c * kernel * kernel, seed, &format!("{name}.weight"));
    Ok(ConvUnit {
        conv: ConvParams::new(Tensor4::from_vec(shape, w)?, vec![T::zero(); out], stride, Padding::Same)?,
        bn: bn_relu.0.then(|| BatchNormParams::new(out)),
        relu: bn_relu.1,
    })
}

fn attention_block<T: Scalar>(spec: &ArchSpec, channels: usize, seed: u64, name: &str) -> Result<Option<Attention<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    Ok(match spec.attention {
        AttentionKind::None => None,
        AttentionKind::Se => Some(Attention::Se(SEParams::he_normal(channels, &mut rng)?)),
        AttentionKind::CLocal => Some(Attention::CLocal(CLocalParams::he_normal(channels, spec.shape_rule, &mut rng)?)),
    })
}

/// Builds a model with He-normal weights, unit BN scale, zero biases. Each
/// tensor draws from its own stream keyed by `(seed, name)`, so variants of
/// one architecture share every common weight.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut nodes = Vec::with_capacity(spec.layers.len());
    let mut channels = INPUT_CHANNELS;
    let (mut convs, mut blocks) = (0, 0);
    for layer in &spec.layers {
        let node = match *layer {
            LayerSpec::Conv { out, kernel, stride, bn_relu, .. } => {
                convs += 1;
                let name = format!("conv{convs}");
                let unit = conv_unit(&name, channels, out, kernel, stride, (bn_relu, bn_relu), seed)?;
                let attention = if spec.has_attention(layer) {
                    attention_block(spec, out, seed, &format!("{name}.attn"))?
                } else {
                    None
                };
                channels = out;
                Node::Conv { name, unit, attention }
            }
            LayerSpec::MaxPool => Node::MaxPool,
            LayerSpec::Bottleneck { mid, out, .. } => {
                blocks += 1;
                let name = format!("block{blocks}");
                let branch = [
                    conv_unit(&format!("{name}.a"), channels, mid, 1, 1, (true, true), seed)?,
                    conv_unit(&format!("{name}.b"), mid, mid, 3, 1, (true, true), seed)?,
                    conv_unit(&format!("{name}.c"), mid, out, 1, 1, (true, false), seed)?,
                ];
                let shortcut = if channels != out {
                    Some(conv_unit(&format!("{name}.shortcut"), channels, out, 1, 1, (true, false), seed)?)
                } else {
                    None
                };
                let attention = if spec.has_attention(layer) {
                    attention_block(spec, out, seed, &format!("{name}.attn"))?
                } else {
                    None
                };
                channels = out;
                Node::Bottleneck {
                    name,
                    branch,
                    shortcut,
                    attention,
                }
            }
            LayerSpec::GlobalAvgPool => Node::GlobalAvgPool,
            LayerSpec::Dense { out } => {
                let w = he_normal(out * channels, channels, seed, "fc.weight");
                let params = DenseParams::new(w, vec![T::zero(); out], channels, out)?;
                channels = out;
                Node::Dense {
                    name: "fc".into(),
                    params,
                }
            }
        };
        nodes.push(node);
    }
    let model = Model {
        spec: spec.clone(),
        nodes,
        gate_override: None,
    };
    let mut names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSpec("duplicate parameter names".into()));
    }
    Ok(model)
}

fn push_params<'a, T: Scalar, P: Parameterized<T>>(prefix: &str, p: &'a P, out: &mut Vec<(String, Param<'a, T>)>) {
    out.extend(p.params().into_iter().map(|s| (format!("{prefix}.{}", s.name), s)));
}

fn push_params_mut<'a, T: Scalar, P: Parameterized<T>>(
    prefix: &str,
    p: &'a mut P,
    out: &mut Vec<(String, ParamMut<'a, T>)>,
) {
    out.extend(p.params_mut().into_iter().map(|s| (format!("{prefix}.{}", s.name), s)));
}

fn unit_params<'a, T: Scalar>(prefix: &str, u: &'a ConvUnit<T>, out: &mut Vec<(String, Param<'a, T>)>) {
    push_params(prefix, &u.conv, out);
    if let Some(bn) = &u.bn {
        push_params(&format!("{prefix}.bn"), bn, out);
    }
}

fn unit_params_mut<'a, T: Scalar>(prefix: &str, u: &'a mut ConvUnit<T>, out: &mut Vec<(String, ParamMut<'a, T>)>) {
    push_params_mut(prefix, &mut u.conv, out);
    if let Some(bn) = &mut u.bn {
        push_params_mut(&format!("{prefix}.bn"), bn, out);
    }
}

const BRANCH: [&str; 3] = ["a", "b", "c"];

fn collect_params<T: Scalar>(nodes: &[Node<T>]) -> Vec<(String, Param<'_, T>)> {
    let mut out = Vec::new();
    for node in nodes {
        match node {
            Node::Conv { name, unit, attention } => {
                unit_params(name, unit, &mut out);
                if let Some(a) = attention {
                    push_params(&format!("{name}.attn"), a, &mut out);
                }
            }
            Node::Bottleneck {
                name,
                branch,
                shortcut,
                attention,
            } => {
                for (u, tag) in branch.iter().zip(BRANCH) {
                    unit_params(&format!("{name}.{tag}"), u, &mut out);
                }
                if let Some(s) = shortcut {
                    unit_params(&format!("{name}.shortcut"), s, &mut out);
                }
                if let Some(a) = attention {
                    push_params(&format!("{name}.attn"), a, &mut out);
                }
            }
            Node::Dense { name, params } => push_params(name, params, &mut out),
            Node::MaxPool | Node::GlobalAvgPool => {}
        }
    }
    out
}

fn collect_params_mut<T: Scalar>(nodes: &mut [Node<T>]) -> Vec<(String, ParamMut<'_, T>)> {
    let mut out = Vec::new();
    for node in nodes {
        match node {
            Node::Conv { name, unit, attention } => {
                unit_params_mut(name, unit, &mut out);
                if let Some(a) = attention {
                    push_params_mut(&format!("{name}.attn"), a, &mut out);
                }
            }
            Node::Bottleneck {
                name,
                branch,
                shortcut,
                attention,
            } => {
                for (u, tag) in branch.iter_mut().zip(BRANCH) {
                    unit_params_mut(&format!("{name}.{tag}"), u, &mut out);
                }
                if let Some(s) = shortcut {
                    unit_params_mut(&format!("{name}.shortcut"), s, &mut out);
                }
                if let Some(a) = attention {
                    push_params_mut(&format!("{name}.attn"), a, &mut out);
                }
            }
            Node::Dense { name, params } => push_params_mut(name, params, &mut out),
            Node::MaxPool | Node::GlobalAvgPool => {}
        }
    }
    out
}

/// Every BN layer with its name prefix, in forward visiting order.
fn collect_bn_mut<T: Scalar>(nodes: &mut [Node<T>]) -> Vec<(String, &mut BatchNormParams<T>)> {
    let mut out = Vec::new();
    for node in nodes {
        match node {
            Node::Conv { name, unit, .. } => {
                if let Some(bn) = &mut unit.bn {
                    out.push((format!("{name}.bn"), bn));
                }
            }
            Node::Bottleneck { name, branch, shortcut, .. } => {
                for (u, tag) in branch.iter_mut().zip(BRANCH) {
                    if let Some(bn) = &mut u.bn {
                        out.push((format!("{name}.{tag}.bn"), bn));
                    }
                }
                if let Some(bn) = shortcut.as_mut().and_then(|s| s.bn.as_mut()) {
                    out.push((format!("{name}.shortcut.bn"), bn));
                }
            }
            _ => {}
        }
    }
    out
}

struct Runner<T> {
    mode: Mode,
    gate_override: Option<T>,
    bn_updates: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Runner<T> {
    fn unit(&mut self, u: &ConvUnit<T>, x: Tensor4<T>) -> Result<(Tensor4<T>, UnitRecord<T>)> {
        let mut y = conv2d_fwd(&x, &u.conv)?;
        let mut bn_rec = None;
        if let Some(bn) = &u.bn {
            match self.mode {
                Mode::Train => {
                    let mut p = bn.clone();
                    let (out, cache) = batchnorm_train(&y, &mut p)?;
                    self.bn_updates.push((p.running_mean, p.running_var));
                    bn_rec = Some(BnRecord::Train(cache));
                    y = out;
                }
                Mode::Infer => {
                    let out = batchnorm_infer(&y, bn)?;
                    bn_rec = Some(BnRecord::Infer(y));
                    y = out;
                }
            }
        }
        let mut pre_relu = None;
        if u.relu {
            let out = relu(&y);
            pre_relu = Some(y);
            y = out;
        }
        Ok((
            y,
            UnitRecord {
                input: x,
                bn: bn_rec,
                pre_relu,
            },
        ))
    }

    fn attention(&self, a: &Attention<T>, x: Tensor4<T>) -> Result<(Tensor4<T>, AttRecord<T>)> {
        if let Some(g) = self.gate_override {
            let gate = vec![g; x.shape().n * x.shape().c];
            return Ok((scale_channels(&x, &gate), AttRecord::Override(g)));
        }
        Ok(match a {
            Attention::Se(p) => {
                let (pre, cache) = p.pre_gate(&x)?;
                let y = gate_and_scale(&x, &pre)?;
                (y, AttRecord::Se { input: x, pre, cache })
            }
            Attention::CLocal(p) => {
                let (pre, cache) = p.pre_gate(&x)?;
                let y = gate_and_scale(&x, &pre)?;
                (y, AttRecord::CLocal { input: x, pre, cache })
            }
        })
    }

    fn node(&mut self, node: &Node<T>, x: Tensor4<T>) -> Result<(Tensor4<T>, NodeRecord<T>)> {
        Ok(match node {
            Node::Conv { unit, attention, .. } => {
                let (y, unit) = self.unit(unit, x)?;
                let (y, att) = match attention {
                    Some(a) => {
                        let (y, r) = self.attention(a, y)?;
                        (y, Some(r))
                    }
                    None => (y, None),
                };
                (y, NodeRecord::Conv { unit, att })
            }
            Node::MaxPool => {
                let (y, argmax) = maxpool2x2(&x)?;
                (y, NodeRecord::MaxPool { shape: x.shape(), argmax })
            }
            Node::Bottleneck {
                branch,
                shortcut,
                attention,
                ..
            } => {
                let mut records = Vec::with_capacity(3);
                let mut h = x.clone();
                for u in branch {
                    let (y, r) = self.unit(u, h)?;
                    records.push(r);
                    h = y;
                }
                let (h, att) = match attention {
                    Some(a) => {
                        let (y, r) = self.attention(a, h)?;
                        (y, Some(r))
                    }
                    None => (h, None),
                };
                let (s, sc) = match shortcut {
                    Some(u) => {
                        let (s, r) = self.unit(u, x)?;
                        (s, Some(r))
                    }
                    None => (x, None),
                };
                let mut sum = h;
                sum.add_assign(&s)?;
                let y = relu(&sum);
                (
                    y,
                    NodeRecord::Bottleneck {
                        branch: records,
                        shortcut: sc,
                        att,
                        sum,
                    },
                )
            }
            Node::GlobalAvgPool => (global_avg_pool(&x), NodeRecord::Gap { shape: x.shape() }),
            Node::Dense { params, .. } => (dense_fwd(&x, params)?, NodeRecord::Dense { input: x }),
        })
    }
}

fn unit_backward<T: Scalar>(u: &ConvUnit<T>, rec: &UnitRecord<T>, dy: Tensor4<T>) -> Result<(Tensor4<T>, ConvUnit<T>)> {
    let mut dy = match &rec.pre_relu {
        Some(pre) => relu_bwd(pre, &dy)?,
        None => dy,
    };
    let mut bn_grad = None;
    if let (Some(bn), Some(r)) = (&u.bn, &rec.bn) {
        let g = match r {
            BnRecord::Train(cache) => batchnorm_train_bwd(cache, bn, &dy)?,
            BnRecord::Infer(input) => batchnorm_infer_bwd(input, bn, &dy)?,
        };
        let mut gp = bn.clone();
        gp.gamma = g.gamma;
        gp.beta = g.beta;
        gp.running_mean.fill(T::zero());
        gp.running_var.fill(T::zero());
        bn_grad = Some(gp);
        dy = g.input;
    }
    let g = conv2d_bwd(&rec.input, &u.conv, &dy)?;
    let conv = ConvParams {
        weight: g.weight,
        bias: g.bias,
        stride: u.conv.stride,
        padding: u.conv.padding,
    };
    Ok((
        g.input,
        ConvUnit {
            conv,
            bn: bn_grad,
            relu: u.relu,
        },
    ))
}

fn attention_backward<T: Scalar>(a: &Attention<T>, rec: &AttRecord<T>, dy: Tensor4<T>) -> Result<(Tensor4<T>, Attention<T>)> {
    Ok(match (a, rec) {
        (_, AttRecord::Override(g)) => {
            let gate = vec![*g; dy.shape().n * dy.shape().c];
            (scale_channels(&dy, &gate), a.zeros_like())
        }
        (Attention::Se(p), AttRecord::Se { input, pre, cache }) => {
            let (mut dx, dpre) = gate_and_scale_bwd(input, pre, &dy)?;
            let (dx2, g) = p.pre_gate_bwd(input, cache, &dpre)?;
            dx.add_assign(&dx2)?;
            (dx, Attention::Se(g))
        }
        (Attention::CLocal(p), AttRecord::CLocal { input, pre, cache }) => {
            let (mut dx, dpre) = gate_and_scale_bwd(input, pre, &dy)?;
            let (dx2, g) = p.pre_gate_bwd(input, cache, &dpre)?;
            dx.add_assign(&dx2)?;
            (dx, Attention::CLocal(g))
        }
        _ => return Err(Error::InvalidSpec("attention record does not match block".into())),
    })
}

fn node_backward<T: Scalar>(node: &Node<T>, rec: &NodeRecord<T>, dy: Tensor4<T>) -> Result<(Tensor4<T>, Node<T>)> {
    Ok(match (node, rec) {
        (Node::Conv { name, unit, attention }, NodeRecord::Conv { unit: ur, att }) => {
            let (dy, ga) = match (attention, att) {
                (Some(a), Some(r)) => {
                    let (d, g) = attention_backward(a, r, dy)?;
                    (d, Some(g))
                }
                _ => (dy, None),
            };
            let (dx, gu) = unit_backward(unit, ur, dy)?;
            (
                dx,
                Node::Conv {
                    name: name.clone(),
                    unit: gu,
                    attention: ga,
                },
            )
        }
        (Node::MaxPool, NodeRecord::MaxPool { shape, argmax }) => (maxpool2x2_bwd(*shape, argmax, &dy)?, Node::MaxPool),
        (
            Node::Bottleneck {
                name,
                branch,
                shortcut,
                attention,
            },
            NodeRecord::Bottleneck {
                branch: br,
                shortcut: sr,
                att,
                sum,
            },
        ) => {
            let dsum = relu_bwd(sum, &dy)?;
            let (mut dh, ga) = match (attention, att) {
                (Some(a), Some(r)) => {
                    let (d, g) = attention_backward(a, r, dsum.clone())?;
                    (d, Some(g))
                }
                _ => (dsum.clone(), None),
            };
            let mut grads: Vec<ConvUnit<T>> = Vec::with_capacity(3);
            for (u, r) in branch.iter().zip(br).rev() {
                let (d, g) = unit_backward(u, r, dh)?;
                grads.push(g);
                dh = d;
            }
            grads.reverse();
            let (dx_short, gs) = match (shortcut, sr) {
                (Some(u), Some(r)) => {
                    let (d, g) = unit_backward(u, r, dsum)?;
                    (d, Some(g))
                }
                _ => (dsum, None),
            };
            dh.add_assign(&dx_short)?;
            let branch: [ConvUnit<T>; 3] = grads.try_into().map_err(|_| Error::InvalidSpec("bottleneck arity".into()))?;
            (
                dh,
                Node::Bottleneck {
                    name: name.clone(),
                    branch,
                    shortcut: gs,
                    attention: ga,
                },
            )
        }
        (Node::GlobalAvgPool, NodeRecord::Gap { shape }) => (global_avg_pool_bwd(*shape, &dy)?, Node::GlobalAvgPool),
        (Node::Dense { name, params }, NodeRecord::Dense { input }) => {
            let g = dense_bwd(input, params, &dy)?;
            (
                g.input,
                Node::Dense {
                    name: name.clone(),
                    params: DenseParams {
                        weight: g.weight,
                        bias: g.bias,
                        ..params.clone()
                    },
                },
            )
        }
        _ => return Err(Error::InvalidSpec("tape does not match model".into())),
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn fingerprint(&self) -> u64 {
        self.spec.fingerprint()
    }

    /// Forces every attention gate to the constant `g` (or restores the
    /// learned gates with `None`).
    pub fn set_gate_override(&mut self, gate: Option<T>) {
        self.gate_override = gate;
    }

    pub fn gate_override(&self) -> Option<T> {
        self.gate_override
    }

    pub fn named_params(&self) -> Vec<(String, Param<'_, T>)> {
        collect_params(&self.nodes)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, ParamMut<'_, T>)> {
        collect_params_mut(&mut self.nodes)
    }

    /// BN running statistics as `(name, values)`, two entries per BN layer.
    pub fn named_buffers(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        fn visit<'a, T>(out: &mut Vec<(String, &'a [T])>, name: String, bn: &'a BatchNormParams<T>) {
            out.push((format!("{name}.running_mean"), &bn.running_mean[..]));
            out.push((format!("{name}.running_var"), &bn.running_var[..]));
        }
        for node in &self.nodes {
            match node {
                Node::Conv { name, unit, .. } => {
                    if let Some(bn) = &unit.bn {
                        visit(&mut out, format!("{name}.bn"), bn);
                    }
                }
                Node::Bottleneck { name, branch, shortcut, .. } => {
                    for (u, tag) in branch.iter().zip(BRANCH) {
                        if let Some(bn) = &u.bn {
                            visit(&mut out, format!("{name}.{tag}.bn"), bn);
                        }
                    }
                    if let Some(bn) = shortcut.as_ref().and_then(|s| s.bn.as_ref()) {
                        visit(&mut out, format!("{name}.shortcut.bn"), bn);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (name, bn) in collect_bn_mut(&mut self.nodes) {
            out.push((format!("{name}.running_mean"), &mut bn.running_mean[..]));
            out.push((format!("{name}.running_var"), &mut bn.running_var[..]));
        }
        out
    }

    /// Total learnable scalars, excluding BN running statistics.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// Learnable scalars inside attention blocks.
    pub fn attention_params(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv { attention, .. } | Node::Bottleneck { attention, .. } => attention.as_ref(),
                _ => None,
            })
            .map(Attention::param_count)
            .sum()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if (s.c, s.h, s.w) != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE) {
            return Err(shape_err("model input", (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE), (s.c, s.h, s.w)));
        }
        Ok(())
    }

    /// Forward pass recording every activation needed by [`backward`](Self::backward).
    /// Does not touch BN running statistics.
    pub fn forward_with_tape(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut runner = Runner {
            mode,
            gate_override: self.gate_override,
            bn_updates: Vec::new(),
        };
        let mut h = x.clone();
        let mut records = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (y, r) = runner.node(node, h)?;
            records.push(r);
            h = y;
        }
        let logits = h.reshape(Shape4::new(x.shape().n, CLASSES, 1, 1))?;
        Ok((
            logits,
            Tape {
                records,
                bn_updates: runner.bn_updates,
            },
        ))
    }

    /// Output of every node for one inference pass, in layer order.
    pub fn activations(&self, x: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        self.check_input(x)?;
        let mut runner = Runner {
            mode: Mode::Infer,
            gate_override: self.gate_override,
            bn_updates: Vec::new(),
        };
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut h = x.clone();
        for node in &self.nodes {
            h = runner.node(node, h)?.0;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Read-only inference with running BN statistics.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_with_tape(x, Mode::Infer)?.0)
    }

    /// Train-mode forward; folds the batch statistics into the BN running
    /// averages.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        let (logits, tape) = self.forward_with_tape(x, Mode::Train)?;
        self.commit_bn_stats(&tape);
        Ok((logits, tape))
    }

    /// Applies the running-statistic updates recorded by a train-mode pass.
    pub fn commit_bn_stats(&mut self, tape: &Tape<T>) {
        for ((_, bn), (mean, var)) in collect_bn_mut(&mut self.nodes).into_iter().zip(&tape.bn_updates) {
            bn.running_mean.clone_from(mean);
            bn.running_var.clone_from(var);
        }
    }

    /// Logits `(n, 10, 1, 1)` for input `(n, 3, 32, 32)`.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.0),
            Mode::Infer => self.infer(x),
        }
    }

    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor4<T>) -> Result<Gradients<T>> {
        if tape.records.len() != self.nodes.len() {
            return Err(Error::InvalidSpec("tape does not match model".into()));
        }
        let mut grads = Vec::with_capacity(self.nodes.len());
        let last_shape = match tape.records.last() {
            Some(NodeRecord::Gap { shape }) => Shape4::new(shape.n, shape.c, 1, 1),
            _ => grad_logits.shape(),
        };
        let mut dy = grad_logits.clone().reshape(last_shape)?;
        for (node, rec) in self.nodes.iter().zip(&tape.records).rev() {
            let (dx, g) = node_backward(node, rec, dy)?;
            grads.push(g);
            dy = dx;
        }
        grads.reverse();
        Ok(Gradients { nodes: grads })
    }

    /// Copies every parameter and buffer whose name also exists in `other`.
    /// Returns how many tensors were copied.
    pub fn copy_matching_from(&mut self, other: &Model<T>) -> usize {
        let src: std::collections::HashMap<String, Vec<T>> = other
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.data.to_vec()))
            .chain(other.named_buffers().into_iter().map(|(n, b)| (n, b.to_vec())))
            .collect();
        let mut copied = 0;
        for (name, p) in self.named_params_mut() {
            if let Some(v) = src.get(&name).filter(|v| v.len() == p.data.len()) {
                p.data.copy_from_slice(v);
                copied += 1;
            }
        }
        for (name, b) in self.named_buffers_mut() {
            if let Some(v) = src.get(&name).filter(|v| v.len() == b.len()) {
                b.copy_from_slice(v);
                copied += 1;
            }
        }
        copied
    }
}
