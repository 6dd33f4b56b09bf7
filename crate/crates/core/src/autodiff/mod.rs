//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every step: parameters are bound as leaves,
//! the forward pass appends nodes, and [`Tape::backward`] fills gradients.
//! Freezing is not a tape concern; [`Adam`] skips frozen parameters.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{evaluate, grad_check, grad_check_with};
pub use optim::Adam;
pub use params::{Bound, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

pub(crate) use tape::{logsumexp, sigmoid};
