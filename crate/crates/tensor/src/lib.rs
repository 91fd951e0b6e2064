//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Computation is recorded on a [`Graph`] (a Wengert tape). Every operation
//! appends one node holding its output value, the ids of its inputs, and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the
//! tape in exact reverse append order and accumulates gradients into leaf
//! nodes that require them.
//!
//! Storage is generic over [`Element`] so the same kernels run in `f32` for
//! training and in `f64` for finite-difference gradient checks. Reductions
//! always accumulate in `f64`.
//!
//! There is no broadcasting beyond tensor-by-scalar ops. Shapes must line up
//! exactly or the op returns [`TensorError::ShapeMismatch`].

mod element;
mod error;
#[cfg(feature = "testing")]
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod parallel;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use ops::conv::Conv2dParams;
pub use ops::norm::{BatchStats, NormMode};
pub use ops::spatial::PadMode;
pub use tensor::{Mask, Shape, Tensor};
