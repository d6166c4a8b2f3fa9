//! Differentiable primitives.
//!
//! Each primitive is available as a pure function on [`Tensor`]s and as a
//! method on [`Tape`](crate::tape::Tape) that records its adjoint.

mod activation;
mod conv;
mod dense;
mod norm;

pub use activation::{logistic, neg_exp, silu, softmax, softplus};
pub use conv::depthwise_conv;
pub use dense::{add, affine, bmm, broadcast_add, mul, scale_shift, split_channels};
pub use norm::{layer_norm, DEFAULT_LN_EPS};
