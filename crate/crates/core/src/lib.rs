#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapt;
pub mod compression;
pub mod encode;
pub mod error;
pub mod finetune;
pub mod lexical;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prompt;
pub mod retrieval;
pub mod synth;
pub mod tokenizer;
mod train;

pub use error::{Error, Result};
