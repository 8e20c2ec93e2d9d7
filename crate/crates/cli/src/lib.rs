//! Offline/online pipeline: database generation, training and evaluation of
//! predicted reduced bases.

pub mod cli;
pub mod config;
pub mod database;
pub mod error;
pub mod offline;
pub mod online;

pub use config::RunConfig;
pub use error::CliError;
