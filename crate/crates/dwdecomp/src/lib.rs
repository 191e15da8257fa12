//! Decomposition of regular convolution layers into depth-wise separable
//! pairs via per-channel SVD, with inter-channel and inter-layer error
//! compensation, plus the experiment harness and model container around it.

pub mod convcore;
pub mod decompose;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod netmodel;
pub mod sampler;
pub mod seed;

pub use error::{DwdError, ErrorClass, Result};
