pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;

pub use attention::{attention, mha, AttentionParams, KeyPools};
pub use conv::{concat_channels, conv2d, crop, from_tokens, global_avg_pool, to_tokens, upsample2x};
pub use elementwise::{
    add, add_scalar, clamp, div, exp, mean, mul, relu, reshape, scale, select, sigmoid, stack_scalars, sub, sum, tanh,
};
pub use linear::{linear, matmul};
pub use norm::{layer_norm, softmax, softmax_in_place};
