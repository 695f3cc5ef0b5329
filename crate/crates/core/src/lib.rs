#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod basis;
pub mod data;
pub mod error;
pub mod exec;
pub mod fpca;
pub mod ftest;
pub mod interp;
pub mod kernel;
pub mod rng;
pub mod score;
pub mod sim;
pub mod smoother;

pub use error::{Error, Result, Stage};
