//! Inverse prediction of an environmental covariate from multivariate count
//! compositions, using a low-rank multivariate Gaussian process model.

pub mod baselines;
pub mod covprior;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod linalg;
pub mod mvgp;
pub mod sampler;
pub mod sim;

pub use error::{Error, Result};
