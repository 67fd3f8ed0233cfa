//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! Operations are recorded on a [`Tape`]. Gradients returned by [`grad`] with
//! `create_graph = true` are themselves recorded, so they can be differentiated
//! again; this is what second-order meta-learning needs.

mod backward;
pub mod check;
mod error;
mod kernels;
pub mod nn;
mod ops;
mod optim;
mod params;
mod tape;

pub use error::{AutodiffError, Result};
pub use nn::Activation;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{BoundParams, ManifestEntry, ParamManifest, ParamSet, FORMAT_VERSION};
pub use tape::{grad, Array, Tape, Var};
