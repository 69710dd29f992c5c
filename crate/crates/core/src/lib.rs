// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::manual_is_multiple_of)]

pub mod autodiff;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod image;
pub mod params;
pub mod prior;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
