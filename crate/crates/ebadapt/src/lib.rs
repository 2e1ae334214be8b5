//! File formats, run manifests and the command-line pipeline around
//! `ebadapt-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;

pub use error::{Error, Result};
