//! File formats, checkpoints, experiment harness and command-line front end
//! for [`mdgfm_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fixture;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
