//! Dense weighted normalized shortcut networks on a small CPU tensor engine.
//!
//! The engine is generic over the element type ([`Scalar`], implemented for
//! `f32` and `f64`). Verification paths run in `f64`; training may use `f32`.

pub mod analysis;
pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod equivalence;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod norm;
pub mod scalar;
pub mod shortcut;
pub mod tensor;
pub mod train;

pub use arch::{Network, NetworkConfig, Variant};
pub use autograd::{ParamId, Tape, Var};
pub use error::{Error, Result};
pub use norm::{Mode, NormKind, NormSpec, NormState};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
