use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::Reconstructor;
use super::scores::{score_set, ModelScore, PredictiveEntry, PredictiveSet, ScoreReport};
use crate::dataio::{CompositionMatrix, CovariateSet, FoldDesign, TwoWaySplit};
use crate::error::{Error, Result};

/// How held-out rows are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Holdout {
    Folds(FoldDesign),
    /// A single train/test split (e.g. the no-analog split).
    Split(TwoWaySplit),
}

impl Holdout {
    /// Held-out rows of each fold, fold 1 first.
    pub fn test_sets(&self) -> Vec<Vec<usize>> {
        match self {
            Holdout::Folds(f) => (1..=f.k).map(|k| f.test_rows(k)).collect(),
            Holdout::Split(s) => vec![s.test.clone()],
        }
    }
}

/// One model on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub model: String,
    /// 1-based.
    pub fold: usize,
    pub test_rows: Vec<usize>,
    pub result: std::result::Result<PredictiveSet, String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalResult {
    pub report: ScoreReport,
    pub folds: Vec<FoldOutcome>,
}

/// Fits every model on every fold's training rows with the held-out
/// covariates hidden, then scores all held-out rows pooled across folds.
/// Fold `f` uses seed `seed + f`; folds run in parallel but the result does
/// not depend on scheduling. Failed folds are reported, not averaged.
pub fn crossval(
    models: &[&dyn Reconstructor],
    counts: &CompositionMatrix,
    cs: &CovariateSet,
    holdout: &Holdout,
    seed: u64,
) -> Result<CrossvalResult> {
    if !cs.missing().is_empty() {
        return Err(Error::invalid_data(
            "cross-validation needs covariates observed for every row",
        ));
    }
    if cs.n_rows() != counts.n_rows() {
        return Err(Error::invalid_data(
            "counts and covariates differ in row count",
        ));
    }
    let sets = holdout.test_sets();
    if sets.iter().any(Vec::is_empty) {
        return Err(Error::invalid_arg("a fold has no held-out rows"));
    }
    let tasks: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..sets.len()).map(move |f| (m, f)))
        .collect();
    let folds: Vec<FoldOutcome> = tasks
        .par_iter()
        .map(|&(m, f)| {
            let model = models[m];
            let test = &sets[f];
            let masked = cs.mask(test);
            let outcome = model
                .reconstruct(counts, &masked, seed.wrapping_add(f as u64 + 1))
                .and_then(|rec| {
                    let entries = rec
                        .rows
                        .iter()
                        .zip(rec.predictions)
                        .map(|(&row, prediction)| PredictiveEntry {
                            row,
                            truth: cs
                                .value_of(row)
                                .expect("cross-validation rows are observed"),
                            prediction,
                        })
                        .collect();
                    Ok((PredictiveSet::new(entries)?, rec.warnings))
                });
            let (result, warnings) = match outcome {
                Ok((ps, w)) => (Ok(ps), w),
                Err(e) => {
                    warn!("{} failed on fold {}: {e}", model.name(), f + 1);
                    (Err(e.to_string()), Vec::new())
                }
            };
            FoldOutcome {
                model: model.name(),
                fold: f + 1,
                test_rows: test.clone(),
                result,
                warnings,
            }
        })
        .collect();
    let mut report = ScoreReport::default();
    for model in models {
        let name = model.name();
        let mine: Vec<&FoldOutcome> = folds.iter().filter(|o| o.model == name).collect();
        let failed_folds = mine
            .iter()
            .filter(|o| o.result.is_err())
            .map(|o| o.fold)
            .collect();
        let mut entries: Vec<PredictiveEntry> = mine
            .iter()
            .filter_map(|o| o.result.as_ref().ok())
            .flat_map(|ps| ps.entries.iter().cloned())
            .collect();
        // pooled scores do not depend on fold order
        entries.sort_by_key(|e| e.row);
        let scores = if entries.is_empty() {
            None
        } else {
            Some(score_set(&PredictiveSet { entries })?)
        };
        report.models.push(ModelScore {
            model: name,
            scores,
            failed_folds,
        });
    }
    Ok(CrossvalResult { report, folds })
}
