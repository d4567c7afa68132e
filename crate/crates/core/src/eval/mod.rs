//! Proper scoring and the cross-validation harness.

mod crossval;
mod models;
mod scores;

pub use crossval::{crossval, CrossvalResult, FoldOutcome, Holdout};
pub use models::{
    reconstruct, reconstruct_with, ConfiguredModel, FitArtifacts, ModelKind, ModelSettings, Reconstruction, Reconstructor,
};
pub use scores::{
    crps_from_draws, lower_median, point_scores, score_set, ModelScore, Prediction,
    PredictiveEntry, PredictiveSet, ScoreReport, Scores, Summary,
};
