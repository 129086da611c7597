//! Dense `f32`/`f64` tensors, a recording graph with reverse-mode
//! differentiation, the Adam optimizer and the `GRLB1` checkpoint container.
//!
//! Everything is single-threaded and deterministic: identical inputs give
//! bit-identical values and gradients.

pub mod adam;
pub mod checkpoint;
pub mod elem;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use elem::Elem;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamStore};
pub use rng::CounterRng;
pub use tensor::Tensor;
