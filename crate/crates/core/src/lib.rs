#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod colehopf;
pub mod continuum;
pub mod dnls;
pub mod error;
pub mod feynman_kac;
pub mod lamperti;
pub mod paths;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
