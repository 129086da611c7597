//! Geometry-aware object removal on procedural scenes: paired-scene
//! generation, depth-flow geometry, diffusion models for depth removal and
//! appearance rendering, and evaluation.

pub mod baseline;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod scenegen;
pub mod stage1;
pub mod stage2;
pub mod train;

pub use error::{CoreError, Result};
pub use imaging::{DepthMap, Image, Mask};
