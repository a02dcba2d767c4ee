#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod condensate;
pub mod darboux;
pub mod dyson;
pub mod error;
pub mod field;
pub mod jost;
pub mod measures;
pub mod numkit;
pub mod verify;

pub use error::{Error, Result};
