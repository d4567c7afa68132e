//! The MVGP joint model: Dirichlet-multinomial counts with a log link to a
//! low-rank multivariate Gaussian process in the covariate.

mod dm;
mod model;

pub use dm::{dm_grad_log_alpha, dm_log_kernel, dm_log_pmf, log_multinomial_coef};
pub(crate) use dm::{dm_kernel, ln_rising};
pub use model::{
    x_prior_from_data, BasisKind, LatentBasis, LogJointTerms, MvgpConfig, MvgpModel, MvgpPriors,
    MvgpState, Overdispersion, XPrior, LOG_ALPHA_CLAMP,
};
