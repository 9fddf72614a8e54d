//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Provides exactly the operations the tissue surrogates need: 3D
//! convolution, max pooling, nearest upsampling, centered crop/pad, LSTM
//! building blocks, and the hexahedral volume functional used by the
//! volume-conservation loss.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod lstm;
pub mod ops;
pub mod real;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::conv::conv3d_param_count;
pub use kernels::pool::pooled_extent;
pub use kernels::volume::Decomposition;
pub use kernels::{HexVolume, Padding, Rounding};
pub use lstm::{lstm_direction, lstm_layer, lstm_param_count, LstmWeights};
pub use ops::{Eager, NodeIndex, Ops};
pub use real::Real;
pub use tensor::Tensor;
