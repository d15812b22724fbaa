//! Multi-concept video customization core.
//!
//! `no_std` + `alloc`: every model, training, curation and evaluation
//! routine is a pure function of its inputs, parameters and seeds. File
//! formats, configuration and the command line live in the `mcvc` crate.

#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod conditioning;
pub mod datapipe;
pub mod error;
pub mod evalbench;
pub mod flowmatch;
pub mod model;
pub mod params;
pub mod tensor;
pub mod toydata;
pub mod training;
pub mod video;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Mat;
