#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod densities;
pub mod divergences;
pub mod error;
pub mod experiments;
pub mod field;
pub mod gradient;
pub mod model_io;
pub mod optim;
pub mod quadrature;
pub mod residual;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
