//! Guided learned vertex descent.
//!
//! Face meshes on a fixed template topology are fitted to one or more posed
//! views by repeatedly predicting per-vertex displacements from pixel-aligned
//! image features and a keypoint-relative spatial encoding.

pub mod config;
pub mod descent;
pub mod encoder;
pub mod evalbench;
pub mod experiment;
pub mod error;
pub mod fingerprint;
pub mod geometry;
pub mod parallel;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
