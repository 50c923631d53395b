//! Finite-depth construction of a doubling weight pair on the plane for
//! which the scalar Muckenhoupt characteristic and the Riesz testing
//! constants stay bounded while the quadratic characteristic, and with it
//! the two-weight norm of the second Riesz transform, grows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dyadic;
pub mod error;
pub mod maximal;
pub mod quad;
pub mod characteristics;
pub mod riesz;
pub mod seed;
pub mod remodel;
pub mod smallstep;
pub mod pipeline;

pub use dyadic::{DyadicInterval, StepWeight1D};
pub use error::{Error, Result};
