//! 2D-to-3D human pose lifting with a multi-order graph convolution, graph
//! order attention, and a body-aware temporal transformer.
//!
//! The crate is self-contained: [`graph`] provides a small reverse-mode
//! autodiff engine over `f64` tensors, on top of which the spatial and
//! temporal modules, the full model, training, and evaluation are built.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod skeleton;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
