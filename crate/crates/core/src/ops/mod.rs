//! Tensor kernels the layers are built from.

mod conv;
mod norm;
mod pointwise;

pub use conv::{conv3d, conv_workspace, ConvGeometry};
pub use norm::{group_norm_silu, group_normalize};
pub use pointwise::{add_bias, upsample_nearest};
