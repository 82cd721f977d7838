//! File formats, dataset storage, run management and the `fuseseg`
//! command line on top of [`fuseseg_core`].

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod trainer;

pub use error::{Error, Result};
