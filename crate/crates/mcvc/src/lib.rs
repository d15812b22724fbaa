//! Files, checkpoints, HTTP backends and commands around `mcvc-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod http;
pub mod tensorfile;

pub use error::{Error, Result};
