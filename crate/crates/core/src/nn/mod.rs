//! Minimal differentiable numerics: tensors, a reverse-mode tape over a
//! closed layer vocabulary, Adam, finite-difference verification and a
//! portable checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{softmax_rows, AttnMask, Gradients, Graph, NodeId};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
