//! Hosted companion to `sysrec-core`: dataset and model file formats, a
//! rayon executor, run manifests and the `sysrec` command-line tool.

pub mod cli;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
