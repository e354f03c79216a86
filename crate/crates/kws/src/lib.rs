//! Audio front end, corpus IO, training driver, evaluation harness and
//! command-line tools for query-by-example keyword spotting.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod frontend;
pub mod manifest;
pub mod plot;
pub mod profile;
pub mod synth;
pub mod trainer;

pub use error::{AppError, AppResult};
