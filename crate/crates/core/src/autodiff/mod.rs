//! Minimal reverse-mode differentiation with a finite-difference verifier.

mod gradcheck;
pub mod suites;
mod tape;

pub use gradcheck::{check_gradients, check_gradients_multi, CoordFailure, GradCheckReport, REL_FLOOR};
pub use tape::{Gradients, Tape, Var, MIN_NORM, PROB_EPS};
