//! Dense tensors, a reverse-mode tape, and the optimizer.

mod batchnorm;
mod gradcheck;
mod graph;
mod ops;
mod optim;
mod param;
mod tensor;

pub use batchnorm::{BatchNormState, BatchStats, Mode};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{softmax_tensor, Graph, Var};
pub use ops::{dropout, l2_normalize, linear};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
