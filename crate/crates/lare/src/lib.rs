//! File formats, pipeline orchestration and benchmarks around
//! [`lare_core`].

pub mod bench;
mod binio;
pub mod cache;
pub mod checkpoint;
pub mod config;
mod error;
pub mod image_io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::Config;
pub use error::{Error, Result};
pub use lare_core;
pub use pipeline::{Features, Pipeline};
