//! Neural network stack: tensors, differentiable kernels, the segmentation
//! model, weight serialization, and finite-difference checking utilities.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and f64 for gradient certification.

pub mod checkpoint;
pub mod fd;
mod gradcheck;
mod model;
mod ops;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use gradcheck::{check_layers, check_model, LayerCheck, LAYER_TOL, MODEL_TOL};
pub use model::{build_model, ForwardCache, Model, ModelConfig, Param, BN_EPS, BN_MOMENTUM};
pub use ops::{
    adaptive_avg_pool, adaptive_avg_pool_backward, batch_norm_eval, batch_norm_train,
    batch_norm_train_backward, bilinear_upsample, bilinear_upsample_backward, concat_channels,
    conv2d, conv2d_backward, conv_out_extent, max_pool2, max_pool2_backward, relu, relu_backward,
    split_channels, transposed_conv2d, transposed_conv2d_backward, update_running_stats, BnCache,
    NnError,
};
pub use tensor::{s, Scalar, Tensor};
