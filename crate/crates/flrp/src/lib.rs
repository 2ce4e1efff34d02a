//! File formats and pipeline commands around `flrp-core`: netpbm images,
//! RTEN tensor files, model and selection files, CSV manifests and reports.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod model;
pub mod pipeline;

pub use error::{Error, Result};
pub use flrp_core;
