//! Dense linear algebra, loss primitives, seeded random streams and a
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod ops;
mod rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamSet, TensorCheck};
pub use matrix::{axpy_slice, dot, Matrix};
pub use ops::*;
pub use rng::{RngStream, STREAM_INIT, STREAM_NEGATIVES, STREAM_SAMPLER, STREAM_SYNTH};
