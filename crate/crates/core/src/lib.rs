//! Pixel-Set Encoder and Temporal Attention Encoder for classifying
//! parcels from multi-spectral image time series, built on a small
//! reverse-mode differentiation engine.

pub mod ad;
pub mod classifier;
pub mod config;
pub mod data;
mod error;
pub mod harness;
pub mod pse;
pub mod tae;

pub use error::{Error, ModelError};
