#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use error::{Error, Result};
