//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]. Differentiable computation happens on a
//! [`Tape`]: every primitive applied to a [`Var`] appends one node holding
//! its forward value and whatever it needs to replay its adjoint. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse recorded order.
//!
//! Model parameters live outside any tape in a [`ParamStore`] and are bound
//! onto a fresh tape for each forward pass, so independent tapes can run on
//! different threads against the same frozen store.

mod check;
mod ops;
mod optim;
mod params;
mod tape;
mod value;

pub use check::{check_gradient, check_gradients};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig, CosineSchedule};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
