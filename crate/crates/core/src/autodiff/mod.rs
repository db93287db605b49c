//! Reverse-mode differentiation over the tensor ops, plus a
//! finite-difference checker.

mod gradcheck;
mod graph;

pub use gradcheck::{rel_err, GradCheck, GradReport, ParamGradError, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
