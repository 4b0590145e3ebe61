//! Parametric knowledge transfer between transformer language models of different scales.
//!
//! The crate scores teacher parameters by first-order sensitivity on a handful of seed
//! samples, extracts student-shaped sub-matrices from the most sensitive layers, and uses
//! their truncated SVD to initialize LoRA adapters on a smaller student model.

pub mod checkpoint;
pub mod error;
pub mod extract;
pub mod heatmap;
pub mod inject;
pub mod linalg;
pub mod pipeline;
pub mod sensitivity;
pub mod tinylm;
pub mod train;

pub use error::{Error, Result};
