//! Dense numerical kernel for the probe graphs.
//!
//! Forward and analytic backward passes for the fixed probe graph (affine
//! maps, scaled-dot-product attention with inverted dropout, weighted
//! softmax cross-entropy), the AdamW optimizer with a cosine schedule,
//! global-norm clipping, representation jitter, and a central-difference
//! gradient oracle. Training arithmetic is `f64` throughout.

mod attention;
mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionOutput};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use ops::{
    apply_jitter, compute_class_weights, linear_backward, linear_forward, matmul, matmul_at_b,
    matmul_a_bt, softmax_in_place, softmax_rows, weighted_ce,
};
pub use optim::{
    adamw_step, clip_global_norm, cosine_lr, global_norm, AdamWConfig, OptState, Param,
};
pub use tensor::Tensor;
