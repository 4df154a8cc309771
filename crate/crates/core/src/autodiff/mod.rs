//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a one-element loss sweeps the tape once in reverse and
//! returns [`Gradients`] for every node that requires them; a leaf used by
//! several consumers receives the sum of all path contributions.
//!
//! Broadcasting follows trailing-dimension alignment: dimensions are compared
//! from the right and a size of 1 (or a missing leading dimension) stretches.
//!
//! Kinks: `abs` has subgradient 0 at 0 and `relu` has derivative 0 at 0.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{broadcast_shape, Tensor};
