use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dm::{dm_grad_log_alpha, dm_kernel, log_multinomial_coef};
use crate::covprior::{
    cov_factor, log_prior_phi, CovFactor, PsiSchedule, ScaleMixture, VineAngles,
};
use crate::dataio::{mean_sd, standardize_covariates, CompositionMatrix, CovariateSet};
use crate::error::{Error, Result};
use crate::kernels::{
    make_knots, CorrelationKernel, KernelFamily, KnotGrid, LowRankBasis, SplineBasis,
};
use crate::linalg::{mvn_logpdf_rows_upper, FlopCounter};

/// Bound on |log α| before exponentiation.
pub const LOG_ALPHA_CLAMP: f64 = 30.0;

/// Prior on a missing covariate: `N(mean, variance)` on the working scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XPrior {
    pub mean: f64,
    pub variance: f64,
}

impl XPrior {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite() && mean.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "covariate prior variance {variance} must be positive"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = x - self.mean;
        -0.5 * z * z / self.variance - 0.5 * (2.0 * std::f64::consts::PI * self.variance).ln()
    }
}

/// `N(x̄, 1.5·s²)` from the observed covariates (n−1 denominator).
pub fn x_prior_from_data(cs: &CovariateSet) -> Result<XPrior> {
    let v = cs.observed_values();
    if v.len() < 2 {
        return Err(Error::invalid_data("need at least two observed covariates"));
    }
    let (m, sd) = mean_sd(&v);
    if !(sd > 0.0) {
        return Err(Error::invalid_data("observed covariates are all equal"));
    }
    XPrior::new(m, 1.5 * sd * sd)
}

/// Hyperparameters not fixed by the model structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvgpPriors {
    pub mu_sd: f64,
    pub rho_lower: f64,
    pub rho_upper: f64,
    pub tau_scale: f64,
    pub eps_tau_scale: f64,
    pub psi: PsiSchedule,
}

impl Default for MvgpPriors {
    fn default() -> Self {
        Self {
            mu_sd: 5.0,
            rho_lower: 0.01,
            rho_upper: 10.0,
            tau_scale: 2.5,
            eps_tau_scale: 1.0,
            psi: PsiSchedule::default(),
        }
    }
}

impl MvgpPriors {
    pub fn log_prior_rho(&self, rho: f64) -> f64 {
        if rho >= self.rho_lower && rho <= self.rho_upper {
            -rho.ln() - (self.rho_upper / self.rho_lower).ln().ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisKind {
    /// Low-rank Gaussian process through knots (the MVGP model).
    PredictiveProcess { kernel: KernelFamily },
    /// Clamped B-splines with N(0, I) coefficients (the GAM variant).
    BSpline { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvgpConfig {
    pub basis: BasisKind,
    pub n_knots: usize,
    pub knot_extend: f64,
    pub overdispersion: bool,
    pub priors: MvgpPriors,
}

impl Default for MvgpConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::PredictiveProcess {
                kernel: KernelFamily::Exponential,
            },
            n_knots: 30,
            knot_extend: 1.5,
            overdispersion: false,
            priors: MvgpPriors::default(),
        }
    }
}

impl MvgpConfig {
    pub fn gam(n_knots: usize) -> Self {
        Self {
            basis: BasisKind::BSpline { degree: 3 },
            n_knots,
            ..Self::default()
        }
    }

    pub fn is_gam(&self) -> bool {
        matches!(self.basis, BasisKind::BSpline { .. })
    }
}

/// Latent residuals `ε_i ~ N(0, Σ_ε)` and the prior on `Σ_ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct Overdispersion {
    pub vine: VineAngles,
    pub scales: ScaleMixture,
    /// `N_total × d`.
    pub eps: DMatrix<f64>,
}

/// One point in the MVGP parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct MvgpState {
    pub mu: DVector<f64>,
    /// `n_basis × d` latent knot values (spline coefficients for the GAM).
    pub eta_star: DMatrix<f64>,
    pub vine: VineAngles,
    pub scales: ScaleMixture,
    pub rho: f64,
    pub overdisp: Option<Overdispersion>,
    x_missing: Vec<f64>,
    x_version: u64,
}

impl MvgpState {
    pub fn new(
        mu: DVector<f64>,
        eta_star: DMatrix<f64>,
        vine: VineAngles,
        scales: ScaleMixture,
        rho: f64,
        overdisp: Option<Overdispersion>,
        x_missing: Vec<f64>,
    ) -> Result<Self> {
        let d = mu.len();
        if eta_star.ncols() != d || vine.dim() != d && d > 1 || scales.tau2.len() != d {
            return Err(Error::invalid_arg(
                "state dimensions disagree on the species count",
            ));
        }
        if !(rho > 0.0) {
            return Err(Error::invalid_arg("length-scale must be positive"));
        }
        Ok(Self {
            mu,
            eta_star,
            vine,
            scales,
            rho,
            overdisp,
            x_missing,
            x_version: 0,
        })
    }

    pub fn n_species(&self) -> usize {
        self.mu.len()
    }

    pub fn x_missing(&self) -> &[f64] {
        &self.x_missing
    }

    /// Writes one missing covariate; bumps the version so stale basis rows
    /// are detectable.
    pub fn set_x_missing(&mut self, k: usize, v: f64) {
        self.x_missing[k] = v;
        self.x_version += 1;
    }

    pub fn x_version(&self) -> u64 {
        self.x_version
    }

    pub fn cov_factor(&self) -> CovFactor {
        cov_factor(&self.vine, &self.scales)
    }

    /// Named scalar parameters, in a fixed order.
    pub fn flat(&self) -> Vec<(String, f64)> {
        let d = self.n_species();
        let mut out = Vec::new();
        for j in 0..d {
            out.push((format!("mu[{j}]"), self.mu[j]));
        }
        for j in 0..d {
            out.push((format!("tau[{j}]"), self.scales.tau2[j].sqrt()));
        }
        for j in 0..d {
            out.push((format!("lambda[{j}]"), self.scales.lambda[j]));
        }
        let omega = self.cov_factor().correlation();
        for j in 1..d {
            for i in 0..j {
                out.push((format!("omega[{i},{j}]"), omega[(i, j)]));
            }
        }
        for (b, p) in self.vine.phi.iter().enumerate() {
            out.push((format!("phi[{b}]"), *p));
        }
        out.push(("rho".to_string(), self.rho));
        for (k, x) in self.x_missing.iter().enumerate() {
            out.push((format!("x[{k}]"), *x));
        }
        for j in 0..d {
            for m in 0..self.eta_star.nrows() {
                out.push((format!("eta[{m},{j}]"), self.eta_star[(m, j)]));
            }
        }
        if let Some(od) = &self.overdisp {
            for j in 0..d {
                out.push((format!("eps_tau[{j}]"), od.scales.tau2[j].sqrt()));
            }
            for (b, p) in od.vine.phi.iter().enumerate() {
                out.push((format!("eps_phi[{b}]"), *p));
            }
        }
        out
    }
}

/// Latent basis for either model variant.
#[derive(Debug, Clone)]
pub enum LatentBasis {
    Predictive(LowRankBasis),
    Spline(SplineBasis),
}

impl LatentBasis {
    pub fn rows(&self) -> &DMatrix<f64> {
        match self {
            LatentBasis::Predictive(b) => b.rows(),
            LatentBasis::Spline(b) => b.rows(),
        }
    }

    pub fn n_basis(&self) -> usize {
        self.rows().ncols()
    }

    pub fn version(&self) -> u64 {
        match self {
            LatentBasis::Predictive(b) => b.version(),
            LatentBasis::Spline(b) => b.version(),
        }
    }

    pub fn set_version(&mut self, v: u64) {
        match self {
            LatentBasis::Predictive(b) => b.set_version(v),
            LatentBasis::Spline(b) => b.set_version(v),
        }
    }

    /// Row at `x`, or `None` if `x` is outside a spline's span.
    pub fn row_at(&self, x: f64) -> Option<DVector<f64>> {
        match self {
            LatentBasis::Predictive(b) => Some(b.basis_row(x)),
            LatentBasis::Spline(b) => b.basis_row(x).ok(),
        }
    }

    pub fn replace_row(&mut self, i: usize, x: f64) -> Result<()> {
        match self {
            LatentBasis::Predictive(b) => {
                b.replace_row(i, x);
                Ok(())
            }
            LatentBasis::Spline(b) => b.replace_row(i, x),
        }
    }

    /// Upper factor `U` of the coefficient prior covariance (`Uᵀ U`).
    pub fn prior_upper(&self) -> DMatrix<f64> {
        match self {
            LatentBasis::Predictive(b) => b.knot_chol_upper(),
            LatentBasis::Spline(b) => DMatrix::identity(b.n_basis(), b.n_basis()),
        }
    }

    /// Log prior density of one coefficient column.
    pub fn coef_log_prior(&self, v: &DVector<f64>) -> f64 {
        match self {
            LatentBasis::Predictive(b) => b.knot_log_density(v),
            LatentBasis::Spline(_) => {
                let n = v.len() as f64;
                -0.5 * v.norm_squared() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }

    /// Shared flop tally (predictive basis only).
    pub fn flops(&self) -> Option<&FlopCounter> {
        match self {
            LatentBasis::Predictive(b) => Some(b.flops()),
            LatentBasis::Spline(_) => None,
        }
    }
}

/// Decomposed joint log density, for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LogJointTerms {
    pub row_dm: Vec<f64>,
    pub coef_prior: f64,
    pub phi_prior: f64,
    pub scale_prior: f64,
    pub rho_prior: f64,
    pub mu_prior: f64,
    pub x_prior: Vec<f64>,
    pub overdisp: f64,
}

impl LogJointTerms {
    pub fn total(&self) -> f64 {
        self.row_dm.iter().sum::<f64>()
            + self.coef_prior
            + self.phi_prior
            + self.scale_prior
            + self.rho_prior
            + self.mu_prior
            + self.x_prior.iter().sum::<f64>()
            + self.overdisp
    }
}

/// Data, covariates (working scale), knots, priors: everything a chain reads
/// but never writes.
#[derive(Debug)]
pub struct MvgpModel {
    data: CompositionMatrix,
    cs: CovariateSet,
    /// `Some(x)` for calibration rows, `None` for reconstruction rows.
    x_obs: Vec<Option<f64>>,
    /// Reconstruction index of each row.
    missing_index: Vec<Option<usize>>,
    knots: KnotGrid,
    xprior: XPrior,
    config: MvgpConfig,
    psi: Vec<f64>,
    log_coef: Vec<f64>,
    clamp_events: AtomicU64,
}

impl MvgpModel {
    /// Standardizes the covariates and places knots over the observed range.
    pub fn new(data: CompositionMatrix, cs: &CovariateSet, config: MvgpConfig) -> Result<Self> {
        let working = standardize_covariates(cs)?;
        let knots = make_knots(&working, config.n_knots, config.knot_extend)?;
        let xprior = x_prior_from_data(&working)?;
        Self::from_parts(data, working, knots, xprior, config)
    }

    /// Binds already-standardized covariates to explicit knots and prior.
    pub fn from_parts(
        data: CompositionMatrix,
        cs: CovariateSet,
        knots: KnotGrid,
        xprior: XPrior,
        config: MvgpConfig,
    ) -> Result<Self> {
        if cs.n_rows() != data.n_rows() {
            return Err(Error::invalid_data(format!(
                "{} covariate rows for {} count rows",
                cs.n_rows(),
                data.n_rows()
            )));
        }
        if let BasisKind::BSpline { degree } = config.basis {
            if degree < 1 {
                return Err(Error::invalid_arg("spline degree must be at least 1"));
            }
        }
        let n = data.n_rows();
        let mut x_obs = vec![None; n];
        for &(i, v) in cs.observed() {
            x_obs[i] = Some(v);
        }
        let mut missing_index = vec![None; n];
        for (k, &i) in cs.missing().iter().enumerate() {
            missing_index[i] = Some(k);
        }
        if let BasisKind::BSpline { .. } = config.basis {
            if x_obs
                .iter()
                .flatten()
                .any(|&x| x < knots.lower() || x > knots.upper())
            {
                return Err(Error::invalid_data(
                    "observed covariates fall outside the spline span",
                ));
            }
        }
        let psi = config.priors.psi.shapes(data.n_species());
        let log_coef = data.rows().map(log_multinomial_coef).collect();
        Ok(Self {
            data,
            cs,
            x_obs,
            missing_index,
            knots,
            xprior,
            config,
            psi,
            log_coef,
            clamp_events: AtomicU64::new(0),
        })
    }

    pub fn data(&self) -> &CompositionMatrix {
        &self.data
    }

    /// Covariates on the working (standardized) scale.
    pub fn covariates(&self) -> &CovariateSet {
        &self.cs
    }

    pub fn knots(&self) -> &KnotGrid {
        &self.knots
    }

    pub fn xprior(&self) -> &XPrior {
        &self.xprior
    }

    pub fn config(&self) -> &MvgpConfig {
        &self.config
    }

    pub fn n_rows(&self) -> usize {
        self.data.n_rows()
    }

    pub fn n_species(&self) -> usize {
        self.data.n_species()
    }

    pub fn missing_rows(&self) -> &[usize] {
        self.cs.missing()
    }

    pub fn n_missing(&self) -> usize {
        self.cs.missing().len()
    }

    pub fn n_basis(&self) -> usize {
        match self.config.basis {
            BasisKind::PredictiveProcess { .. } => self.knots.len(),
            BasisKind::BSpline { degree } => self.knots.len() + degree - 1,
        }
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn kernel_family(&self) -> Option<KernelFamily> {
        match self.config.basis {
            BasisKind::PredictiveProcess { kernel } => Some(kernel),
            BasisKind::BSpline { .. } => None,
        }
    }

    /// Covariate of every row: observed values and the state's imputations.
    pub fn x_all(&self, state: &MvgpState) -> Vec<f64> {
        self.x_obs
            .iter()
            .zip(&self.missing_index)
            .map(|(o, m)| match (o, m) {
                (Some(v), _) => *v,
                (None, Some(k)) => state.x_missing[*k],
                (None, None) => unreachable!("row is neither observed nor missing"),
            })
            .collect()
    }

    /// Basis at length-scale `rho` and the state's covariates, stamped with
    /// the state's version.
    pub fn build_basis(&self, state: &MvgpState) -> Result<LatentBasis> {
        self.build_basis_at(state, state.rho)
    }

    pub(crate) fn build_basis_at(&self, state: &MvgpState, rho: f64) -> Result<LatentBasis> {
        let x = self.x_all(state);
        let mut b = match self.config.basis {
            BasisKind::PredictiveProcess { kernel } => {
                let k = CorrelationKernel::new(kernel, rho)?;
                LatentBasis::Predictive(LowRankBasis::build(&x, &self.knots, &k)?)
            }
            BasisKind::BSpline { degree } => {
                LatentBasis::Spline(SplineBasis::build(&x, &self.knots, degree)?)
            }
        };
        b.set_version(state.x_version);
        Ok(b)
    }

    fn check_state(&self, state: &MvgpState, basis: &LatentBasis) -> Result<()> {
        let d = self.n_species();
        if state.mu.len() != d
            || state.eta_star.ncols() != d
            || state.eta_star.nrows() != basis.n_basis()
            || state.x_missing.len() != self.n_missing()
            || basis.rows().nrows() != self.n_rows()
        {
            return Err(Error::invalid_arg(
                "state dimensions do not match the bound model",
            ));
        }
        if basis.version() != state.x_version {
            return Err(Error::StaleBasis {
                basis: basis.version(),
                state: state.x_version,
            });
        }
        Ok(())
    }

    /// Fills `out` with log α for one row and returns the number of clamped
    /// entries. `w_row` is `z_i η*`.
    #[inline]
    pub(crate) fn log_alpha_into(
        mu: &[f64],
        r: &DMatrix<f64>,
        w_row: &[f64],
        eps_row: Option<&[f64]>,
        out: &mut [f64],
    ) -> u64 {
        let d = mu.len();
        let mut clamped = 0;
        for k in 0..d {
            let col = r.column(k);
            let mut v = mu[k];
            for m in 0..=k {
                v += col[m] * w_row[m];
            }
            if let Some(e) = eps_row {
                v += e[k];
            }
            if !(v.abs() <= LOG_ALPHA_CLAMP) {
                clamped += 1;
                v = if v.is_nan() {
                    v
                } else {
                    v.clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
                };
            }
            out[k] = v;
        }
        clamped
    }

    /// Dirichlet-multinomial kernel of row `i` given its latent mean
    /// `w_row = z_i η*`. `scratch` must have length ≥ d.
    #[inline]
    pub(crate) fn row_loglik(
        &self,
        i: usize,
        mu: &[f64],
        r: &DMatrix<f64>,
        w_row: &[f64],
        eps_row: Option<&[f64]>,
        scratch: &mut [f64],
    ) -> f64 {
        let d = mu.len();
        let out = &mut scratch[..d];
        let c = Self::log_alpha_into(mu, r, w_row, eps_row, out);
        if c > 0 {
            self.clamp_events.fetch_add(c, Ordering::Relaxed);
        }
        for v in out.iter_mut() {
            *v = v.exp();
        }
        dm_kernel(self.data.row(i), out)
    }

    /// `α_i = exp(μ + Rᵀ (z_i η*)ᵀ + ε_i)`.
    pub fn latent_alpha(
        &self,
        state: &MvgpState,
        basis: &LatentBasis,
        row: usize,
    ) -> Result<DVector<f64>> {
        self.check_state(state, basis)?;
        let r = state.cov_factor().r;
        let w = Self::w_row(basis.rows(), row, &state.eta_star);
        let eps = state
            .overdisp
            .as_ref()
            .map(|o| o.eps.row(row).iter().copied().collect::<Vec<_>>());
        let mut out = vec![0.0; self.n_species()];
        let c = Self::log_alpha_into(state.mu.as_slice(), &r, &w, eps.as_deref(), &mut out);
        if c > 0 {
            self.clamp_events.fetch_add(c, Ordering::Relaxed);
        }
        Ok(DVector::from_iterator(
            out.len(),
            out.iter().map(|v| v.exp()),
        ))
    }

    /// `(z_i η*)` with a fixed summation order.
    #[inline]
    pub(crate) fn w_row(z: &DMatrix<f64>, i: usize, eta: &DMatrix<f64>) -> Vec<f64> {
        let nb = eta.nrows();
        (0..eta.ncols())
            .map(|j| {
                let col = eta.column(j);
                let mut s = 0.0;
                for m in 0..nb {
                    s += z[(i, m)] * col[m];
                }
                s
            })
            .collect()
    }

    /// Same as [`w_row`](Self::w_row) for a free-standing basis row.
    #[inline]
    pub(crate) fn w_from_z(z: &[f64], eta: &DMatrix<f64>) -> Vec<f64> {
        (0..eta.ncols())
            .map(|j| {
                let col = eta.column(j);
                let mut s = 0.0;
                for (m, zm) in z.iter().enumerate() {
                    s += zm * col[m];
                }
                s
            })
            .collect()
    }

    pub fn log_joint_terms(&self, state: &MvgpState, basis: &LatentBasis) -> Result<LogJointTerms> {
        self.check_state(state, basis)?;
        let d = self.n_species();
        let cf = state.cov_factor();
        let mut scratch = vec![0.0; d];
        let row_dm = (0..self.n_rows())
            .map(|i| {
                let w = Self::w_row(basis.rows(), i, &state.eta_star);
                let eps = state
                    .overdisp
                    .as_ref()
                    .map(|o| o.eps.row(i).iter().copied().collect::<Vec<_>>());
                self.row_loglik(
                    i,
                    state.mu.as_slice(),
                    &cf.r,
                    &w,
                    eps.as_deref(),
                    &mut scratch,
                ) + self.log_coef[i]
            })
            .collect();
        let coef_prior = (0..d)
            .map(|j| basis.coef_log_prior(&state.eta_star.column(j).into_owned()))
            .sum();
        let priors = &self.config.priors;
        let rho_prior = match self.config.basis {
            BasisKind::PredictiveProcess { .. } => priors.log_prior_rho(state.rho),
            BasisKind::BSpline { .. } => 0.0,
        };
        let mu_prior = state
            .mu
            .iter()
            .map(|m| {
                -0.5 * (m / priors.mu_sd).powi(2)
                    - priors.mu_sd.ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        let x_prior = state
            .x_missing
            .iter()
            .map(|&x| self.xprior.log_density(x))
            .collect();
        let overdisp = match &state.overdisp {
            None => 0.0,
            Some(od) => overdisp_log_prior(od)?,
        };
        Ok(LogJointTerms {
            row_dm,
            coef_prior,
            phi_prior: log_prior_phi(&state.vine),
            scale_prior: state.scales.log_prior(),
            rho_prior,
            mu_prior,
            x_prior,
            overdisp,
        })
    }

    /// Unnormalized log posterior of the state.
    pub fn log_joint(&self, state: &MvgpState, basis: &LatentBasis) -> Result<f64> {
        Ok(self.log_joint_terms(state, basis)?.total())
    }

    /// Analytic `∂ log_joint / ∂ x̃_k` (predictive-process basis only).
    pub fn dlog_joint_dx(&self, state: &MvgpState, basis: &LatentBasis, k: usize) -> Result<f64> {
        self.check_state(state, basis)?;
        let LatentBasis::Predictive(pb) = basis else {
            return Err(Error::invalid_arg(
                "analytic covariate gradient needs the predictive-process basis",
            ));
        };
        let i = self.cs.missing()[k];
        let x = state.x_missing[k];
        let d = self.n_species();
        let r = state.cov_factor().r;
        let w = Self::w_row(basis.rows(), i, &state.eta_star);
        let eps = state
            .overdisp
            .as_ref()
            .map(|o| o.eps.row(i).iter().copied().collect::<Vec<_>>());
        let mut la = vec![0.0; d];
        Self::log_alpha_into(state.mu.as_slice(), &r, &w, eps.as_deref(), &mut la);
        let alpha: Vec<f64> = la.iter().map(|v| v.exp()).collect();
        let g = dm_grad_log_alpha(self.data.row(i), &alpha);
        let dz = pb.basis_row_derivative(x);
        let dw = Self::w_from_z(dz.as_slice(), &state.eta_star);
        let mut total = 0.0;
        for kk in 0..d {
            if la[kk].abs() >= LOG_ALPHA_CLAMP {
                continue;
            }
            let dla: f64 = (0..=kk).map(|m| r[(m, kk)] * dw[m]).sum();
            total += g[kk] * dla;
        }
        Ok(total - (x - self.xprior.mean) / self.xprior.variance)
    }

    /// Overdispersed starting point for chain `chain`.
    pub fn initial_state<R: Rng + ?Sized>(&self, chain: usize, rng: &mut R) -> MvgpState {
        let d = self.n_species();
        let props = self.data.proportions();
        let n = props.len() as f64;
        let mu = DVector::from_iterator(
            d,
            (0..d).map(|j| (props.iter().map(|p| p[j]).sum::<f64>() / n).max(1e-3).ln()),
        );
        let nb = self.n_basis();
        let eta_star = DMatrix::from_fn(nb, d, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let vine = VineAngles::zeros(d, self.config.priors.psi);
        let scales = ScaleMixture::unit(d, self.config.priors.tau_scale);
        // chain c starts at μ_X + s·0.5·sd with s = 0, +1, −1, +2, −2, …
        let sd = (self.xprior.variance / 1.5).sqrt();
        let step = chain.div_ceil(2) as f64 * if chain % 2 == 1 { 1.0 } else { -1.0 };
        let mut x0 = self.xprior.mean + step * 0.5 * sd;
        if self.config.is_gam() {
            let (lo, hi) = (self.knots.lower(), self.knots.upper());
            x0 = x0.clamp(lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo));
        }
        let overdisp = self.config.overdispersion.then(|| Overdispersion {
            vine: VineAngles::zeros(d, self.config.priors.psi),
            scales: ScaleMixture::unit(d, self.config.priors.eps_tau_scale),
            eps: DMatrix::zeros(self.n_rows(), d),
        });
        MvgpState {
            mu,
            eta_star,
            vine,
            scales,
            rho: 1.0,
            overdisp,
            x_missing: vec![x0; self.n_missing()],
            x_version: 0,
        }
    }
}

/// Prior density of the overdispersion block: residuals, vine, and scales.
pub(crate) fn overdisp_log_prior(od: &Overdispersion) -> Result<f64> {
    Ok(eps_log_density(&od.eps, &cov_factor(&od.vine, &od.scales))?
        + log_prior_phi(&od.vine)
        + od.scales.log_prior())
}

/// `Σ_i log N(ε_i; 0, Rᵀ R)`.
pub(crate) fn eps_log_density(eps: &DMatrix<f64>, cf: &CovFactor) -> Result<f64> {
    Ok(mvn_logpdf_rows_upper(eps, &cf.r))
}
