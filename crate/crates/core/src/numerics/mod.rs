//! Dense tensors, recorded reverse-mode differentiation, and the
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod ops;
pub mod tensor;

pub use gradcheck::{gradient_check, CheckReport, GraphLoss, GraphObjective, Objective};
pub use graph::{Gradients, Graph, Var};
pub use ops::{layer_norm, matmul, softmax};
pub use tensor::{Precision, Scalar, Tensor};
