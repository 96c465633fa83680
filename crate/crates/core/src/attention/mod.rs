//! Channel attention blocks: C-Local and the Squeeze-and-Excitation baseline.

mod clocal;
mod descriptor;
mod gate;
mod se;

pub use clocal::{
    clocal_backward, clocal_forward, clocal_param_count, clocal_shape_rule, combine_stage1, combine_stage1_bwd,
    strand_conv_stage2, strand_conv_stage2_bwd, CLocalCache, CLocalParams, ShapeRule, Stage1Grads, Stage2Grads,
};
pub use descriptor::{build_descriptor, build_descriptor_bwd, ChannelDescriptor};
pub use gate::{gate_and_scale, gate_and_scale_bwd, scale_channels, ChannelGate};
pub use se::{se_backward, se_forward, se_param_count, SECache, SEParams, SE_REDUCTION};
