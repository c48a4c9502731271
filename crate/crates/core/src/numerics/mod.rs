//! Dense linear algebra and differentiable primitives.

mod attention;
pub mod finite_diff;
mod layers;
mod matrix;
mod ops;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use layers::{glorot_uniform, Linear, Parameters};
pub use matrix::{dot, Matrix};
pub use ops::{
    gelu, gelu_grad, kl_divergence, kl_divergence_with_grad, l2_norm, l2_normalize_rows,
    l2_normalize_rows_backward, pearson_distance, pearson_distance_with_grad, relu, softmax_rows,
    softmax_rows_backward, softmax_temp, softmax_temp_backward, DualValue, PROB_EPS, VARIANCE_EPS,
};
