//! Experiment drivers and file formats behind the `samattr` binary.

pub mod config;
pub mod error;
pub mod experiments;
pub mod ingest;
pub mod report;
