//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Everything is `f64` and single-threaded per [`Graph`]. A graph is built by
//! a forward pass, consumed by one [`Graph::backward`], then dropped.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::ParamStore;
pub use error::{Result, TensorError};
pub use gradcheck::{
    gradcheck, gradcheck_coords, gradcheck_coords_floor, relative_error, relative_error_floor, GradcheckReport, Probe,
};
pub use graph::{sigmoid, Graph, Var};
pub use init::{xavier_bound, xavier_uniform};
pub use tensor::Tensor;
