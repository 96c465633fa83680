//! Architecture descriptions and the networks built from them.

mod network;
mod spec;

pub use network::{build_model, Attention, ConvUnit, Gradients, Model, Node, Tape};
pub use spec::{ArchName, ArchSpec, AttentionKind, FeatureSize, LayerSpec, CLASSES, INPUT_CHANNELS, INPUT_SIZE};
