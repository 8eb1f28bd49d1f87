//! Command-line tool, project store and local HTTP service of the featseg
//! workbench.

pub mod cli;
pub mod config;
pub mod deep;
pub mod service;
pub mod store;
