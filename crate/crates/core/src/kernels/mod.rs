//! Correlation functions, knot placement, and the low-rank bases that map
//! covariate values to loadings on the latent knot process.

mod basis;
mod bspline;
mod correlation;

pub use basis::{gram, knot_correlation, make_knots, KnotGrid, LowRankBasis, KNOT_JITTER};
pub use bspline::{bspline_basis, SplineBasis};
pub use correlation::{correlation, CorrelationKernel, KernelFamily};
