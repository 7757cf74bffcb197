#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod bandstop;
pub mod data;
pub mod distribution;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod training;

pub use error::{Error, Result};
