//! Command line, table IO and thread-pool driver for `emenv-core`.

pub mod cli;
pub mod error;
pub mod parallel;
pub mod report;
pub mod table;
