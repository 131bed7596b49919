// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod dde;
pub mod error;
pub mod experiments;
pub mod field;
pub mod models;
pub mod nn;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
