//! Declarative layouts of the plane CNN, ALL-CNN and bottleneck ResNet.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::attention::{ShapeRule, SE_REDUCTION};
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 32;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchName {
    Plane,
    AllCnn,
    ResNet,
}

impl ArchName {
    pub const ALL: [ArchName; 3] = [ArchName::Plane, ArchName::AllCnn, ArchName::ResNet];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Plane => "plane",
            ArchName::AllCnn => "allcnn",
            ArchName::ResNet => "resnet",
        }
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown architecture {s:?}")))
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Se,
    CLocal,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::None, AttentionKind::Se, AttentionKind::CLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::CLocal => "clocal",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown attention kind {s:?}")))
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Same-padded convolution, optionally followed by BN → ReLU and an
    /// attention block.
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        bn_relu: bool,
        attention: bool,
    },
    MaxPool,
    /// 1×1 `mid` → 3×3 `mid` → 1×1 `out` residual branch, attention on the
    /// branch before the shortcut addition.
    Bottleneck { mid: usize, out: usize, attention: bool },
    GlobalAvgPool,
    Dense { out: usize },
}

/// Channels and spatial size after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSize {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub arch: ArchName,
    pub attention: AttentionKind,
    pub shape_rule: ShapeRule,
    pub layers: Vec<LayerSpec>,
}

const fn conv(out: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel,
        stride,
        bn_relu: true,
        attention: true,
    }
}

impl ArchSpec {
    pub fn new(arch: ArchName, attention: AttentionKind) -> Self {
        use LayerSpec::*;
        let layers = match arch {
            ArchName::Plane => vec![
                conv(32, 3, 1),
                MaxPool,
                conv(64, 3, 1),
                MaxPool,
                conv(128, 3, 1),
                conv(128, 3, 1),
                GlobalAvgPool,
                Dense { out: CLASSES },
            ],
            ArchName::AllCnn => vec![
                conv(64, 3, 1),
                conv(64, 3, 1),
                conv(64, 3, 2),
                conv(128, 3, 1),
                conv(128, 3, 1),
                conv(128, 3, 2),
                conv(128, 1, 1),
                Conv {
                    out: CLASSES,
                    kernel: 1,
                    stride: 1,
                    bn_relu: false,
                    attention: false,
                },
                GlobalAvgPool,
            ],
            ArchName::ResNet => vec![
                Conv {
                    out: 32,
                    kernel: 3,
                    stride: 1,
                    bn_relu: true,
                    attention: false,
                },
                Bottleneck { mid: 16, out: 32, attention: true },
                MaxPool,
                Bottleneck { mid: 32, out: 64, attention: true },
                MaxPool,
                Bottleneck { mid: 64, out: 128, attention: true },
                Bottleneck { mid: 64, out: 128, attention: true },
                GlobalAvgPool,
                Dense { out: CLASSES },
            ],
        };
        Self {
            arch,
            attention,
            shape_rule: ShapeRule::default(),
            layers,
        }
    }

    pub fn with_shape_rule(mut self, rule: ShapeRule) -> Self {
        self.shape_rule = rule;
        self
    }

    /// Whether layer `layer` carries an attention block in this variant.
    pub fn has_attention(&self, layer: &LayerSpec) -> bool {
        let attached = match *layer {
            LayerSpec::Conv { attention, .. } | LayerSpec::Bottleneck { attention, .. } => attention,
            _ => false,
        };
        attached && self.attention != AttentionKind::None
    }

    /// Feature size after each layer; fails on any inconsistency.
    pub fn validate(&self) -> Result<Vec<FeatureSize>> {
        let mut cur = FeatureSize {
            channels: INPUT_CHANNELS,
            h: INPUT_SIZE,
            w: INPUT_SIZE,
        };
        let mut sizes = Vec::with_capacity(self.layers.len());
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if flat && !matches!(layer, LayerSpec::Dense { .. }) {
                return Err(Error::InvalidSpec(format!("layer {i}: spatial layer after global pooling")));
            }
            cur = match *layer {
                LayerSpec::Conv { out, kernel, stride, .. } => {
                    if stride == 0 || kernel == 0 || out == 0 || kernel > cur.h {
                        return Err(Error::InvalidSpec(format!("layer {i}: bad convolution")));
                    }
                    FeatureSize {
                        channels: out,
                        h: (cur.h - 1) / stride + 1,
                        w: (cur.w - 1) / stride + 1,
                    }
                }
                LayerSpec::MaxPool => {
                    if !cur.h.is_multiple_of(2) || !cur.w.is_multiple_of(2) {
                        return Err(Error::InvalidSpec(format!("layer {i}: pooling odd size {}x{}", cur.h, cur.w)));
                    }
                    FeatureSize { h: cur.h / 2, w: cur.w / 2, ..cur }
                }
                LayerSpec::Bottleneck { mid, out, .. } => {
                    if mid == 0 || out == 0 {
                        return Err(Error::InvalidSpec(format!("layer {i}: empty bottleneck")));
                    }
                    FeatureSize { channels: out, ..cur }
                }
                LayerSpec::GlobalAvgPool => {
                    flat = true;
                    FeatureSize { h: 1, w: 1, ..cur }
                }
                LayerSpec::Dense { out } => {
                    if !flat {
                        return Err(Error::InvalidSpec(format!("layer {i}: dense layer before global pooling")));
                    }
                    FeatureSize { channels: out, h: 1, w: 1 }
                }
            };
            if self.has_attention(layer) {
                match self.attention {
                    AttentionKind::Se if !cur.channels.is_multiple_of(SE_REDUCTION) => {
                        return Err(Error::InvalidSpec(format!("layer {i}: SE needs channels divisible by 8")));
                    }
                    AttentionKind::CLocal => {
                        self.shape_rule.apply(cur.channels)?;
                    }
                    _ => {}
                }
            }
            sizes.push(cur);
        }
        if !flat || cur.channels != CLASSES {
            return Err(Error::InvalidSpec(format!(
                "classifier head must end in {CLASSES} pooled outputs, got {} channels",
                cur.channels
            )));
        }
        Ok(sizes)
    }

    /// Stable text form hashed into the fingerprint.
    pub fn canonical(&self) -> String {
        let mut s = format!(
            "arch={};attn={};rule={}/{};",
            self.arch, self.attention, self.shape_rule.filter_ratio, self.shape_rule.strand_ratio
        );
        for l in &self.layers {
            let _ = match *l {
                LayerSpec::Conv { out, kernel, stride, bn_relu, attention } => {
                    write!(s, "conv({out},{kernel},{stride},{bn_relu},{attention})|")
                }
                LayerSpec::MaxPool => write!(s, "maxpool|"),
                LayerSpec::Bottleneck { mid, out, attention } => write!(s, "bottleneck({mid},{out},{attention})|"),
                LayerSpec::GlobalAvgPool => write!(s, "gap|"),
                LayerSpec::Dense { out } => write!(s, "dense({out})|"),
            };
        }
        s
    }

    /// 64-bit FNV-1a of [`canonical`](Self::canonical).
    pub fn fingerprint(&self) -> u64 {
        self.canonical().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    fn attention_rows(&self, channels: usize) -> Vec<String> {
        match self.attention {
            AttentionKind::None => vec![],
            AttentionKind::Se => vec![format!("fc, [{}, {}]", channels / SE_REDUCTION, channels)],
            AttentionKind::CLocal => match self.shape_rule.apply(channels) {
                Ok((f, l)) => vec![format!("conv, 2×1, {f}"), format!("conv, {l}×1, 1")],
                Err(_) => vec!["<invalid>".into()],
            },
        }
    }

    /// Human-readable layer table: output size, then the layers producing it.
    pub fn summary(&self) -> Result<String> {
        let sizes = self.validate()?;
        let title = match self.attention {
            AttentionKind::None => "baseline",
            AttentionKind::Se => "with SE block",
            AttentionKind::CLocal => "with C-Local block",
        };
        let mut rows: Vec<(String, String)> = Vec::new();
        let mut in_channels = INPUT_CHANNELS;
        let mut i = 0;
        while i < self.layers.len() {
            let layer = &self.layers[i];
            let size = sizes[i];
            let mut cells: Vec<String> = Vec::new();
            match *layer {
                LayerSpec::Conv { out, kernel, stride, .. } => {
                    cells.push(format!("conv, {kernel}×{kernel}, {out}"));
                    if stride > 1 {
                        cells.push(format!("Strides:{stride}"));
                    }
                }
                LayerSpec::MaxPool => cells.push("Max Pooling 2×2".into()),
                LayerSpec::Bottleneck { mid, out, .. } => {
                    cells.push(format!("conv, 1×1, {mid}"));
                    cells.push(format!("conv, 3×3, {mid}"));
                    cells.push(format!("conv, 1×1, {out}"));
                    if in_channels != out {
                        cells.push(format!("shortcut conv, 1×1, {out}"));
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    cells.push("global average pool".into());
                    if let Some(LayerSpec::Dense { out }) = self.layers.get(i + 1) {
                        cells.push(format!("{out}-d fc"));
                        i += 1;
                    }
                    cells.push("softmax".into());
                }
                LayerSpec::Dense { out } => cells.push(format!("{out}-d fc")),
            }
            if self.has_attention(layer) {
                cells.extend(self.attention_rows(size.channels));
            }
            in_channels = size.channels;
            rows.push((format!("{} × {}", size.h, size.w), cells.join(", ")));
            i += 1;
        }
        let mut out = format!("{} ({title})\n", self.arch);
        let _ = writeln!(out, "{:<12} layers", "output size");
        for (size, desc) in rows {
            let _ = writeln!(out, "{size:<12} {desc}");
        }
        Ok(out)
    }
}
