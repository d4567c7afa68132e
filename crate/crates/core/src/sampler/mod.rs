//! MCMC: elliptical slice sampling, adaptive random-walk Metropolis, the
//! MVGP Gibbs scan, multi-chain orchestration, and split-R̂.

mod arwm;
mod chains;
mod ess;
mod gibbs;

pub use arwm::{arwm_step, AdaptState, ArwmOutcome, Transform};
pub use chains::{
    gelman_rubin, gelman_rubin_all, gelman_rubin_series, run_chains, run_chains_with_states,
    ChainConfig, ChainKernel, FlatParams, PosteriorSamples,
};
pub use ess::{ess_step, ess_step_centered, ess_step_with, EssOutcome};
pub use gibbs::{
    fit_mvgp, is_monitored, MvgpChain, MvgpFit, MvgpSampler, SweepOptions, XUpdateMode, STAGES,
};
