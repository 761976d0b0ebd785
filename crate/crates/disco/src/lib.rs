//! File formats, RGB-D frame loading and the command line around
//! [`disco_core`].
//!
//! Every text format starts with a magic word and a version number, skips
//! blank lines and lines starting with `#`, and writes reals in their
//! shortest round-trip decimal form.

pub mod cli;
pub mod config;
mod error;
pub mod formats;
pub mod frameio;
pub mod ply;

pub use error::{Error, Result};
