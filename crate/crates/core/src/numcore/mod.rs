//! Dense tensors, reverse-mode differentiation and plain SGD.

pub mod fft;
mod graph;
mod params;
mod tensor;

pub use graph::{log_sigmoid, log_softmax_rows, sigmoid, Graph, Var};
pub use params::{clip_global_norm, fd_gradient, max_relative_error, sgd_step, ParamSet, FD_STEP};
pub use tensor::Tensor;
