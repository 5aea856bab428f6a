//! File formats, the end-to-end pipeline, verification suites and the
//! command line on top of `nudiff-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod verify;

pub use error::{Error, Result};
