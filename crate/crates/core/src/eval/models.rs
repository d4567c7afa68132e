use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scores::Prediction;
use crate::baselines::{
    bummer_fit, bummer_predict, mat_fit, mat_predict, mlrc_fit, mlrc_predict, wa_fit, wa_predict,
    BummerPriors, DeshrinkKind, PointPrediction, Weighting,
};
use crate::dataio::{CompositionMatrix, CovariateSet};
use crate::error::{Error, Result};
use crate::mvgp::{BasisKind, MvgpConfig, MvgpModel};
use crate::sampler::{fit_mvgp, ChainConfig, SweepOptions};

const RHAT_WARN: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mvgp,
    Gam,
    Bummer,
    Wa,
    Mat,
    Mlrc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Mvgp,
        ModelKind::Gam,
        ModelKind::Bummer,
        ModelKind::Wa,
        ModelKind::Mat,
        ModelKind::Mlrc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Mvgp => "mvgp",
            ModelKind::Gam => "gam",
            ModelKind::Bummer => "bummer",
            ModelKind::Wa => "wa",
            ModelKind::Mat => "mat",
            ModelKind::Mlrc => "mlrc",
        }
    }

    /// True for models that return predictive draws.
    pub fn is_probabilistic(&self) -> bool {
        matches!(self, ModelKind::Mvgp | ModelKind::Gam | ModelKind::Bummer)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::invalid_arg(format!(
                    "unknown model '{s}' (expected mvgp, gam, bummer, wa, mat or mlrc)"
                ))
            })
    }
}

/// Settings for every model; each model reads only its own fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub chain: ChainConfig,
    pub mvgp: MvgpConfig,
    pub sweep: SweepOptions,
    /// Knots for the GAM variant's B-spline basis.
    pub gam_knots: usize,
    pub bummer: BummerPriors,
    pub wa_boot: usize,
    pub deshrink: DeshrinkKind,
    pub mat_k: usize,
    pub mat_boot: usize,
    pub mat_weighting: Weighting,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            mvgp: MvgpConfig::default(),
            sweep: SweepOptions::default(),
            gam_knots: 10,
            bummer: BummerPriors::default(),
            wa_boot: 1000,
            deshrink: DeshrinkKind::Linear,
            mat_k: 10,
            mat_boot: 1000,
            mat_weighting: Weighting::Uniform,
        }
    }
}

/// Grid points of the response-curve output.
const CURVE_GRID: usize = 101;

/// Predictions for the reconstruction rows of a dataset, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub rows: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub warnings: Vec<String>,
    /// Largest split-R̂ over monitored parameters (probabilistic models).
    pub max_rhat: Option<f64>,
    /// Posterior output, when requested and the model has one.
    pub artifacts: Option<FitArtifacts>,
}

/// Posterior output of a Bayesian model beyond its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FitArtifacts {
    /// One CSV per chain: `iteration` plus one column per scalar.
    pub chain_csvs: Vec<String>,
    pub rhat: Vec<(String, f64)>,
    /// Per chain: block name → acceptance rate.
    pub acceptance: Vec<Vec<(String, f64)>>,
    /// Knot locations in original units (MVGP and GAM).
    pub knots: Vec<f64>,
    /// Covariate grid (original units) with the posterior-mean relative
    /// abundance of each species, `grid × species`.
    pub response: Option<(Vec<f64>, DMatrix<f64>)>,
    /// Posterior-mean cross-species correlation.
    pub correlation: Option<DMatrix<f64>>,
}

/// Anything that predicts hidden covariates from counts and the observed
/// covariates of the other rows.
pub trait Reconstructor: Sync {
    fn name(&self) -> String;

    /// Predicts every row listed in `cs.missing()`.
    fn reconstruct(
        &self,
        counts: &CompositionMatrix,
        cs: &CovariateSet,
        seed: u64,
    ) -> Result<Reconstruction>;
}

/// A [`ModelKind`] with its settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfiguredModel {
    pub kind: ModelKind,
    pub settings: ModelSettings,
}

impl Reconstructor for ConfiguredModel {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn reconstruct(
        &self,
        counts: &CompositionMatrix,
        cs: &CovariateSet,
        seed: u64,
    ) -> Result<Reconstruction> {
        reconstruct(self.kind, &self.settings, counts, cs, seed)
    }
}

fn interval(p: PointPrediction) -> Prediction {
    Prediction::Interval {
        point: p.point,
        lower: p.lower,
        upper: p.upper,
    }
}

/// Fits `kind` on the rows with observed covariates and predicts the rest.
pub fn reconstruct(
    kind: ModelKind,
    settings: &ModelSettings,
    counts: &CompositionMatrix,
    cs: &CovariateSet,
    seed: u64,
) -> Result<Reconstruction> {
    reconstruct_with(kind, settings, counts, cs, seed, false)
}

/// [`reconstruct`], also collecting [`FitArtifacts`] when `artifacts` is set.
pub fn reconstruct_with(
    kind: ModelKind,
    settings: &ModelSettings,
    counts: &CompositionMatrix,
    cs: &CovariateSet,
    seed: u64,
    artifacts: bool,
) -> Result<Reconstruction> {
    if cs.n_rows() != counts.n_rows() {
        return Err(Error::invalid_data(format!(
            "{} covariate rows for {} count rows",
            cs.n_rows(),
            counts.n_rows()
        )));
    }
    let rows = cs.missing().to_vec();
    if rows.is_empty() {
        return Err(Error::invalid_arg(
            "nothing to predict: no rows with missing covariates",
        ));
    }
    // baselines calibrate on observed rows only, in original units
    let cs = cs.unstandardize();
    let train_rows = cs.observed_rows();
    let train_x = cs.observed_values();
    let as_f64 = |i: usize| {
        counts
            .row(i)
            .iter()
            .map(|&c| c as f64)
            .collect::<Vec<f64>>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut max_rhat = None;
    let mut extra = None;
    let predictions = match kind {
        ModelKind::Mvgp | ModelKind::Gam => {
            let config = if kind == ModelKind::Gam {
                MvgpConfig {
                    basis: BasisKind::BSpline { degree: 3 },
                    n_knots: settings.gam_knots,
                    ..settings.mvgp
                }
            } else {
                settings.mvgp
            };
            let model = MvgpModel::new(counts.clone(), &cs, config)?;
            let chain = ChainConfig {
                seed,
                ..settings.chain
            };
            let fit = fit_mvgp(&model, &chain, settings.sweep)?;
            max_rhat = fit.max_rhat();
            for (name, r) in &fit.rhat {
                if *r > RHAT_WARN {
                    warnings.push(format!("R-hat for {name} is {r:.3} (> {RHAT_WARN})"));
                }
            }
            if fit.clamp_events > 0 {
                warnings.push(format!("log-alpha clamped {} times", fit.clamp_events));
            }
            let w = model.covariates();
            if artifacts {
                let obs = w.observed_values();
                let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let grid: Vec<f64> = (0..CURVE_GRID)
                    .map(|g| lo + (hi - lo) * g as f64 / (CURVE_GRID - 1) as f64)
                    .collect();
                let curves = fit.response_curves(&model, &grid)?;
                extra = Some(FitArtifacts {
                    chain_csvs: (0..fit.samples.n_chains())
                        .map(|c| fit.samples.chain_csv(c))
                        .collect(),
                    rhat: fit.rhat.clone(),
                    acceptance: fit.acceptance.clone(),
                    knots: model.knots().locations().iter().map(|&k| w.to_original(k)).collect(),
                    response: Some((grid.iter().map(|&g| w.to_original(g)).collect(), curves)),
                    correlation: Some(fit.mean_correlation()),
                });
            }
            (0..rows.len())
                .map(|k| Prediction::Draws {
                    draws: fit
                        .x_draws(k)
                        .into_iter()
                        .map(|v| w.to_original(v))
                        .collect(),
                })
                .collect()
        }
        ModelKind::Bummer => {
            let train = counts.select_rows(&train_rows)?;
            let chain = ChainConfig {
                seed,
                ..settings.chain
            };
            let fit = bummer_fit(&train, &train_x, &chain, settings.bummer)?;
            max_rhat = fit.max_rhat();
            for (name, r) in &fit.rhat {
                if *r > RHAT_WARN {
                    warnings.push(format!("R-hat for {name} is {r:.3} (> {RHAT_WARN})"));
                }
            }
            if artifacts {
                extra = Some(FitArtifacts {
                    chain_csvs: (0..fit.samples.n_chains())
                        .map(|c| fit.samples.chain_csv(c))
                        .collect(),
                    rhat: fit.rhat.clone(),
                    acceptance: fit
                        .acceptance
                        .iter()
                        .map(|c| c.iter().enumerate().map(|(j, &a)| (format!("species[{j}]"), a)).collect())
                        .collect(),
                    knots: Vec::new(),
                    response: None,
                    correlation: None,
                });
            }
            rows.iter()
                .map(|&i| {
                    let draws = bummer_predict(&fit, counts.row(i), &fit.xprior, &mut rng)?;
                    Ok(Prediction::Draws { draws })
                })
                .collect::<Result<Vec<_>>>()?
        }
        ModelKind::Wa => {
            let train: Vec<Vec<f64>> = train_rows.iter().map(|&i| as_f64(i)).collect();
            let fit = wa_fit(
                &train,
                &train_x,
                settings.wa_boot,
                settings.deshrink,
                &mut rng,
            )?;
            rows.iter()
                .map(|&i| wa_predict(&fit, &as_f64(i)).map(interval))
                .collect::<Result<Vec<_>>>()?
        }
        ModelKind::Mat => {
            let train: Vec<Vec<f64>> = train_rows.iter().map(|&i| as_f64(i)).collect();
            let k = settings.mat_k.min(train.len());
            let fit = mat_fit(
                &train,
                &train_x,
                k,
                settings.mat_weighting,
                settings.mat_boot,
                &mut rng,
            )?;
            rows.iter()
                .map(|&i| mat_predict(&fit, &as_f64(i)).map(interval))
                .collect::<Result<Vec<_>>>()?
        }
        ModelKind::Mlrc => {
            let train: Vec<Vec<u32>> = train_rows.iter().map(|&i| counts.row(i).to_vec()).collect();
            let fit = mlrc_fit(&train, &train_x, settings.mvgp.knot_extend)?;
            if !fit.excluded.is_empty() {
                warnings.push(format!(
                    "{} species excluded from response curves",
                    fit.excluded.len()
                ));
            }
            let mut flagged = 0;
            let preds = rows
                .iter()
                .map(|&i| {
                    let p = mlrc_predict(&fit, counts.row(i))?;
                    flagged += usize::from(p.flagged);
                    Ok(interval(p))
                })
                .collect::<Result<Vec<_>>>()?;
            if flagged > 0 {
                warnings.push(format!("{flagged} rows have a flat likelihood profile"));
            }
            preds
        }
    };
    Ok(Reconstruction {
        rows,
        predictions,
        warnings,
        max_rhat,
        artifacts: extra,
    })
}
