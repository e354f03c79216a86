//! Model, loss and scoring core for query-by-example keyword spotting.
//!
//! Everything here is `no_std` + `alloc`; audio IO, file formats and the CLI
//! live in the `qbye` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod pooling;
pub mod profiling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
