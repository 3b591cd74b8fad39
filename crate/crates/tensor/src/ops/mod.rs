//! Differentiable operations, implemented as `impl Graph<T>` blocks.

mod conv;
mod elementwise;
mod matmul;
pub mod norm;
mod shape;
mod spatial;

pub use conv::{col2im_add, conv_out_size, im2col};
pub use spatial::{avg_pool_matrix, bilinear_matrix};
