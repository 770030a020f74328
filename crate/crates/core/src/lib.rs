//! Sparse tensor factorization built on hierarchical Gamma processes.
//!
//! Entry indices come from a Poisson random measure whose rate is a product
//! of hierarchical Gamma processes, one per mode. Entry values come from a
//! Gaussian process over the node locations and sociabilities, approximated
//! with random Fourier features and fitted by stochastic variational
//! inference.

// Index loops mirror the matrix algebra in the numeric kernels, and
// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dense;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod io;
pub mod math;
pub mod model;
pub mod prior;
pub mod rff;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Params, TrainConfig, TrainedModel};
pub use tensor::SparseTensorData;
