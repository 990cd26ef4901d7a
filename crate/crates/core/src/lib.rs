//! Audio-driven talking-portrait radiance field with semantic labels, trained on CPU.
//!
//! The pipeline: [`dataio`] loads or synthesizes a sequence, [`trainer`] fits a
//! [`model::Model`] with [`scheduler`] deciding where rays go, and [`eval`] renders and
//! scores the result.

pub mod dataio;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fields;
pub mod model;
pub mod numerics;
pub mod renderer;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
