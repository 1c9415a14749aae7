//! Minimal tensor library with reverse-mode automatic differentiation.
//!
//! Tensors are dense and row-major. A fresh [`Graph`] is built for every
//! forward pass; parameters live in a [`ParamSet`] and are copied into the
//! graph as leaves. After [`Graph::backward`], [`Graph::accumulate_into`]
//! adds leaf gradients back into the parameter set for the optimizer.
//!
//! Every op is generic over [`Scalar`], so the same model code can run in
//! `f64` for finite-difference checks.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{clip_grad_norm, Adam};
pub use graph::{Graph, Var};
pub use tensor::{Param, ParamId, ParamSet, Scalar, Tensor};
