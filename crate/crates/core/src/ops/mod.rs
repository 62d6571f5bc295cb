//! Differentiable operations, all recorded on a [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod residual;
mod shape;
mod softmax;

pub use conv::{conv_out_extent, PoolSpec};
pub use norm::{RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use residual::aggregation_scale;
