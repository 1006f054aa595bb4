//! Differentiable tensor operations, attached to [`Tensor`](crate::Tensor)
//! as inherent methods.

mod conv;
mod elementwise;
mod layout;
mod linalg;
mod nn;
mod reduce;
