use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::PointPrediction;
use crate::dataio::mean_sd;
use crate::error::{Error, Result};

const GRID_POINTS: usize = 500;
/// Half the 95% χ²₁ quantile.
const PROFILE_DROP: f64 = 1.92;

/// `logit π(x) = β0 + β1 z + β2 z²` with `z` the standardized covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesCurve {
    pub species: usize,
    pub beta: [f64; 3],
}

impl SpeciesCurve {
    fn log_pi(&self, z: f64) -> (f64, f64) {
        let eta = self.beta[0] + self.beta[1] * z + self.beta[2] * z * z;
        // ln σ(η), ln(1 − σ(η)) without overflow
        let softplus = |t: f64| {
            if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            }
        };
        (-softplus(-eta), -softplus(eta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrcFit {
    pub n_species: usize,
    pub curves: Vec<SpeciesCurve>,
    /// Species left out (too rare, or the fit did not converge).
    pub excluded: Vec<usize>,
    pub x_mean: f64,
    pub x_sd: f64,
    /// Search grid on the original covariate scale.
    pub grid: Vec<f64>,
}

/// Binomial-logit IRLS; `None` when it fails to converge.
fn irls(z: &[f64], succ: &[f64], trials: &[f64]) -> Option<[f64; 3]> {
    let mut beta = Vector3::zeros();
    let p0 = (succ.iter().sum::<f64>() / trials.iter().sum::<f64>()).clamp(1e-6, 1.0 - 1e-6);
    beta[0] = (p0 / (1.0 - p0)).ln();
    let mut dev_old = f64::INFINITY;
    for _ in 0..100 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        let mut dev = 0.0;
        for ((&zi, &yi), &mi) in z.iter().zip(succ).zip(trials) {
            let f = Vector3::new(1.0, zi, zi * zi);
            let eta = beta.dot(&f);
            let p = 1.0 / (1.0 + (-eta).exp());
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            let w = mi * p * (1.0 - p);
            h += f * f.transpose() * w;
            g += f * (yi - mi * p);
            dev -= yi * p.ln() + (mi - yi) * (1.0 - p).ln();
        }
        let step = h.cholesky()?.solve(&g);
        beta += step;
        if !beta.iter().all(|b| b.is_finite() && b.abs() < 1e4) {
            return None;
        }
        if (dev_old - dev).abs() < 1e-8 * (1.0 + dev.abs())
            && step.norm() < 1e-6 * (1.0 + beta.norm())
        {
            return Some([beta[0], beta[1], beta[2]]);
        }
        dev_old = dev;
    }
    None
}

/// Fits one Gaussian-logit curve per species to counts out of row totals.
/// The prediction grid spans the covariate range extended by
/// `extend` standard deviations on each side.
pub fn mlrc_fit(counts: &[Vec<u32>], x: &[f64], extend: f64) -> Result<MlrcFit> {
    let n = counts.len();
    if n != x.len() || n < 4 {
        return Err(Error::invalid_arg(
            "MLRC needs at least four calibration rows with covariates",
        ));
    }
    let d = counts[0].len();
    let (x_mean, x_sd) = mean_sd(x);
    if !(x_sd > 0.0) {
        return Err(Error::invalid_data("calibration covariates are all equal"));
    }
    let z: Vec<f64> = x.iter().map(|v| (v - x_mean) / x_sd).collect();
    let trials: Vec<f64> = counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).sum())
        .collect();
    let mut curves = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..d {
        let succ: Vec<f64> = counts.iter().map(|r| r[j] as f64).collect();
        let present = succ.iter().filter(|&&s| s > 0.0).count();
        if present < 3 {
            excluded.push(j);
            continue;
        }
        match irls(&z, &succ, &trials) {
            Some(beta) => curves.push(SpeciesCurve { species: j, beta }),
            None => {
                warn!("response curve for species {j} did not converge; excluded");
                excluded.push(j);
            }
        }
    }
    if curves.is_empty() {
        return Err(Error::Model(
            "no species response curve could be fitted".into(),
        ));
    }
    if !excluded.is_empty() {
        warn!(
            "{} species excluded from response-curve calibration",
            excluded.len()
        );
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min) - extend * x_sd;
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max) + extend * x_sd;
    let grid = (0..GRID_POINTS)
        .map(|g| lo + (hi - lo) * g as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    Ok(MlrcFit {
        n_species: d,
        curves,
        excluded,
        x_mean,
        x_sd,
        grid,
    })
}

impl MlrcFit {
    /// Binomial log-likelihood of a composition at each grid point.
    pub fn profile(&self, y: &[u32]) -> Result<Vec<f64>> {
        if y.len() != self.n_species {
            return Err(Error::invalid_arg(format!(
                "composition has {} species, expected {}",
                y.len(),
                self.n_species
            )));
        }
        let m: f64 = y.iter().map(|&c| c as f64).sum();
        if self.curves.iter().all(|c| y[c.species] == 0) {
            return Err(Error::invalid_arg(
                "composition has no counts for any fitted species",
            ));
        }
        Ok(self
            .grid
            .iter()
            .map(|&xg| {
                let z = (xg - self.x_mean) / self.x_sd;
                self.curves
                    .iter()
                    .map(|c| {
                        let (lp, lq) = c.log_pi(z);
                        let yj = y[c.species] as f64;
                        yj * lp + (m - yj) * lq
                    })
                    .sum()
            })
            .collect())
    }
}

/// Grid argmax of the profile likelihood, with the region within 1.92 log
/// units of the maximum as the interval; flagged if it spans the grid.
pub fn mlrc_predict(fit: &MlrcFit, y_new: &[u32]) -> Result<PointPrediction> {
    let prof = fit.profile(y_new)?;
    let (best, &top) = prof
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .ok_or_else(|| Error::Model("empty grid".into()))?;
    let keep = |g: usize| prof[g] >= top - PROFILE_DROP;
    let mut lo = best;
    while lo > 0 && keep(lo - 1) {
        lo -= 1;
    }
    let mut hi = best;
    while hi + 1 < prof.len() && keep(hi + 1) {
        hi += 1;
    }
    let mut p = PointPrediction::new(fit.grid[best], fit.grid[lo], fit.grid[hi])?;
    p.flagged = lo == 0 && hi == prof.len() - 1;
    Ok(p)
}
