//! Minimal reverse-mode differentiation substrate: tensors, a recording
//! graph, the operators the reconstruction networks need, Adam, and the
//! `TTMT` tensor container.

pub mod adam;
pub mod container;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use container::{Entry, TensorBundle};
pub use graph::{row_argmax, Grads, Graph, Var, NORM_FLOOR};
pub use kernels::PatchGeometry;
pub use tensor::{Scalar, Tensor};
