//! Configuration, experiment pipelines, output files and the CLI.

pub mod cli;
pub mod config;
pub mod report;
pub mod studies;
