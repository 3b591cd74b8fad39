//! Minimal dense-tensor autodiff used by the GeomPrompt models.
//!
//! Values live in [`Tensor`]; a [`Graph`] records one forward pass and
//! differentiates it. Layers own [`Param`]s and expose them through the
//! [`Module`] visitor, which is what optimizers, checkpoints and
//! freeze checks walk.

pub mod error;
pub mod float;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, StatUpdate, Var};
pub use ops::norm::BatchNormMode;
pub use param::{Module, Param, ParamId, ParamKind};
pub use tensor::Tensor;
