//! Comparison methods: weighted averaging, modern analogs, maximum-likelihood
//! response curves, and the Gaussian-kernel Bayesian response model.

mod bummer;
mod mat;
mod mlrc;
mod wa;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bummer::{bummer_fit, bummer_predict, BummerFit, BummerParams, BummerPriors};
pub use mat::{mat_fit, mat_predict, squared_chord, MatFit, Weighting};
pub use mlrc::{mlrc_fit, mlrc_predict, MlrcFit, SpeciesCurve};
pub use wa::{wa_fit, wa_predict, Deshrink, DeshrinkKind, WaFit};

/// Point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval is not informative (e.g. a flat profile).
    pub flagged: bool,
}

impl PointPrediction {
    pub fn new(point: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(point.is_finite() && lower.is_finite() && upper.is_finite())
            || lower > point
            || point > upper
        {
            return Err(Error::Numerical(format!(
                "invalid prediction interval: {lower} ≤ {point} ≤ {upper} fails"
            )));
        }
        Ok(Self {
            point,
            lower,
            upper,
            flagged: false,
        })
    }
}

/// Rows renormalized to proportions; zero-total rows are rejected.
pub(crate) fn to_proportions(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let s: f64 = r.iter().sum();
            if !(s > 0.0) {
                return Err(Error::invalid_data(format!("row {i} has zero total")));
            }
            Ok(r.iter().map(|v| v / s).collect())
        })
        .collect()
}
