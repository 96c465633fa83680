//! Layer primitives: forward and backward kernels.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod gemm;
mod loss;
mod pool;

pub use activation::{
    activate, activate_bwd, relu, relu_bwd, sigmoid_bwd, sigmoid_fwd, softmax, softmax_bwd, Activation,
};
pub use batchnorm::{
    batchnorm, batchnorm_infer, batchnorm_infer_bwd, batchnorm_train, batchnorm_train_bwd, BatchNormCache,
    BatchNormGrads, BatchNormParams, Mode, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_bwd, conv2d_fwd, same_pad, ConvGrads, ConvParams, Padding};
pub use dense::{dense_bwd, dense_fwd, DenseGrads, DenseParams};
pub use loss::{batch_cross_entropy, predictions, softmax_cross_entropy};
pub use pool::{global_avg_pool, global_avg_pool_bwd, maxpool2x2, maxpool2x2_bwd};
