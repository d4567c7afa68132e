use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::quantile;
use crate::error::{Error, Result};

/// Sample CRPS, `(1/K) Σ |y_k − t| − (1/2K²) Σ_k Σ_κ |y_k − y_κ|`, in the
/// nonnegative orientation (smaller is better). The double sum is computed
/// from the sorted draws in O(K log K).
pub fn crps_from_draws(draws: &[f64], truth: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::invalid_arg("CRPS needs at least two draws"));
    }
    if !truth.is_finite() || draws.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid_arg("CRPS inputs must be finite"));
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    if s[0] == s[s.len() - 1] {
        // point mass: exact, without the rounding of the two sums
        return Ok((s[0] - truth).abs());
    }
    let k = s.len() as f64;
    let data_term = s.iter().map(|y| (y - truth).abs()).sum::<f64>() / k;
    // Σ_k Σ_κ |y_k − y_κ| = 2 Σ_i (2i − K + 1) y_(i), 0-based order statistics
    let pair_sum: f64 = s
        .iter()
        .enumerate()
        .map(|(i, y)| (2.0 * i as f64 - k + 1.0) * y)
        .sum::<f64>()
        * 2.0;
    Ok((data_term - pair_sum / (2.0 * k * k)).max(0.0))
}

/// Lower median: order statistic `⌈K/2⌉` (1-based), i.e. the smaller of the
/// two middle values for even `K`.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

/// What a model predicts for one held-out row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Draws { draws: Vec<f64> },
    Interval { point: f64, lower: f64, upper: f64 },
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        match self {
            Prediction::Draws { draws } => {
                if draws.len() < 2 || draws.iter().any(|d| !d.is_finite()) {
                    return Err(Error::invalid_data(
                        "draw predictions need ≥ 2 finite draws",
                    ));
                }
            }
            Prediction::Interval {
                point,
                lower,
                upper,
            } => {
                if !(lower <= point && point <= upper) || !point.is_finite() {
                    return Err(Error::invalid_data(format!(
                        "interval prediction violates {lower} ≤ {point} ≤ {upper}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean (for MSPE), lower median (for MAE), and 95% bounds.
    pub fn summary(&self) -> Summary {
        match self {
            Prediction::Draws { draws } => Summary {
                mean: draws.iter().sum::<f64>() / draws.len() as f64,
                median: lower_median(draws),
                lower: quantile(draws, 0.025),
                upper: quantile(draws, 0.975),
            },
            &Prediction::Interval {
                point,
                lower,
                upper,
            } => Summary {
                mean: point,
                median: point,
                lower,
                upper,
            },
        }
    }

    /// CRPS; a point prediction counts as a single atom, so this is its
    /// absolute error.
    pub fn crps(&self, truth: f64) -> Result<f64> {
        match self {
            Prediction::Draws { draws } => crps_from_draws(draws, truth),
            Prediction::Interval { point, .. } => Ok((point - truth).abs()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveEntry {
    pub row: usize,
    pub truth: f64,
    pub prediction: Prediction,
}

/// Predictions for held-out rows together with their hidden truths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictiveSet {
    pub entries: Vec<PredictiveEntry>,
}

impl PredictiveSet {
    pub fn new(entries: Vec<PredictiveEntry>) -> Result<Self> {
        for e in &entries {
            e.prediction.validate()?;
            if !e.truth.is_finite() {
                return Err(Error::invalid_data(format!(
                    "truth for row {} is not finite",
                    e.row
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Shared prediction schema: `row_id,point,lower,upper,truth`, point =
    /// predictive mean.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("row_id,point,lower,upper,truth\n");
        for e in &self.entries {
            let s = e.prediction.summary();
            writeln!(
                out,
                "{},{},{},{},{}",
                e.row, s.mean, s.lower, s.upper, e.truth
            )
            .unwrap();
        }
        out
    }
}

/// Averages over held-out rows. Coverage is a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub crps: f64,
    pub mspe: f64,
    pub mae: f64,
    pub coverage95: f64,
    pub n_rows: usize,
}

/// MSPE (predictive mean), MAE (lower median) and 95% coverage.
pub fn point_scores(ps: &PredictiveSet) -> Result<(f64, f64, f64)> {
    let s = score_set(ps)?;
    Ok((s.mspe, s.mae, s.coverage95))
}

pub fn score_set(ps: &PredictiveSet) -> Result<Scores> {
    if ps.is_empty() {
        return Err(Error::invalid_arg("no predictions to score"));
    }
    let n = ps.len() as f64;
    let (mut crps, mut se, mut ae, mut cov) = (0.0, 0.0, 0.0, 0.0);
    for e in &ps.entries {
        let s = e.prediction.summary();
        crps += e.prediction.crps(e.truth)?;
        se += (s.mean - e.truth).powi(2);
        ae += (s.median - e.truth).abs();
        if s.lower <= e.truth && e.truth <= s.upper {
            cov += 1.0;
        }
    }
    Ok(Scores {
        crps: crps / n,
        mspe: se / n,
        mae: ae / n,
        coverage95: 100.0 * cov / n,
        n_rows: ps.len(),
    })
}

/// One model's line in a [`ScoreReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    /// `None` when every fold failed.
    pub scores: Option<Scores>,
    /// Folds (1-based) whose fit or prediction failed; excluded from the
    /// averages.
    pub failed_folds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub models: Vec<ModelScore>,
}

impl ScoreReport {
    pub fn get(&self, model: &str) -> Option<&ModelScore> {
        self.models.iter().find(|m| m.model == model)
    }

    /// Models × {CRPS, MSPE, MAE, coverage}, plus row count and failures.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("model,crps,mspe,mae,coverage95,n_rows,failed_folds\n");
        for m in &self.models {
            let failed = m
                .failed_folds
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(";");
            match &m.scores {
                Some(s) => writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    m.model, s.crps, s.mspe, s.mae, s.coverage95, s.n_rows, failed
                ),
                None => writeln!(out, "{},NA,NA,NA,NA,0,{}", m.model, failed),
            }
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_crps(d: &[f64], t: f64) -> f64 {
        let k = d.len() as f64;
        let a: f64 = d.iter().map(|y| (y - t).abs()).sum::<f64>() / k;
        let b: f64 = d
            .iter()
            .flat_map(|y| d.iter().map(move |z| (y - z).abs()))
            .sum::<f64>();
        a - b / (2.0 * k * k)
    }

    #[test]
    fn crps_hand_values() {
        assert_eq!(crps_from_draws(&[1.0, 1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!((crps_from_draws(&[0.0, 2.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        let d = [0.3, -1.2, 2.5, 0.0, 0.7, 0.7];
        assert!((crps_from_draws(&d, 0.4).unwrap() - naive_crps(&d, 0.4)).abs() < 1e-12);
        assert!(crps_from_draws(&[1.0], 0.0).is_err());
        assert!(crps_from_draws(&[1.0, f64::NAN], 0.0).is_err());
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[1.0, -1.0]), -1.0);
        assert_eq!(lower_median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn point_prediction_crps_is_abs_error() {
        let p = Prediction::Interval {
            point: 2.0,
            lower: 1.0,
            upper: 3.0,
        };
        assert_eq!(p.crps(0.5).unwrap(), 1.5);
    }

    #[test]
    fn oracle_model_scores_zero() {
        let entries = (0..5)
            .map(|i| PredictiveEntry {
                row: i,
                truth: i as f64,
                prediction: Prediction::Draws {
                    draws: vec![i as f64; 4],
                },
            })
            .collect();
        let s = score_set(&PredictiveSet::new(entries).unwrap()).unwrap();
        assert_eq!(
            (s.crps, s.mspe, s.mae, s.coverage95),
            (0.0, 0.0, 0.0, 100.0)
        );
    }
}
