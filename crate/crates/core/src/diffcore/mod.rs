//! Reverse-mode automatic differentiation over dense f64 tensors.

mod check;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use tape::{NodeId, SpikeMode, Tape, VthRef};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

pub(crate) use tape::{sigmoid, softplus};
