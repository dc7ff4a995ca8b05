//! Minimal dense-tensor math with tape-based reverse-mode autodiff,
//! AdamW, and a flat binary checkpoint format.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
