//! Image-pair tamper localisation with a coordinate-based decoder.
//!
//! An original and a tampered image are encoded into feature grids, fused
//! by local attention at arbitrary query coordinates, decoded back to RGB
//! and compared by a small head that labels each pixel.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod ingestion;
pub mod mask;
pub mod maskgen;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod superres;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
