//! Library surface of the batch front end: config parsing and mode
//! execution, kept separate from the binary so tests can drive them
//! directly.

pub mod config;
pub mod exec;
