//! Scenario synthesis, file formats, the experiment runner and reporting
//! around [`eot_core`].

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;
pub mod scenario;

pub use error::{EotError, Result};
