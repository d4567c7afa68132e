//! Metropolis-within-Gibbs scan for the MVGP model.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arwm::{arwm_step, AdaptState, Transform};
use super::chains::{
    gelman_rubin_all, run_chains_with_states, ChainConfig, ChainKernel, PosteriorSamples,
};
use super::ess::{ess_step_centered, ess_step_with};
use crate::covprior::{
    cov_factor, log_prior_phi, sample_lambda_given_tau2, CovFactor, ScaleMixture, VineAngles,
};
use crate::error::{Error, Result};
use crate::linalg::mvn_logpdf_rows_upper;
use crate::mvgp::{LatentBasis, MvgpModel, MvgpState};

/// How a missing-covariate update refreshes the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XUpdateMode {
    /// Recompute only the updated row (O(ℓ²) per evaluation).
    #[default]
    RowLocal,
    /// Rebuild every row for every evaluation. Reference implementation.
    FullRebuild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepOptions {
    pub x_update: XUpdateMode,
}

/// Stages of one scan, in order.
pub const STAGES: [&str; 8] = ["eta", "mu", "phi", "tau2", "lambda", "rho", "x", "overdisp"];

/// Passes over the hyperparameter updates per scan.
const HYPER_PASSES: usize = 1;

/// Slice steps per knot-field column per scan. The field is the slowest
/// block; everything else inherits its mixing.
const ETA_STEPS: usize = 5;

/// Slice steps per reconstruction row per scan; the posterior of a hidden
/// covariate is often multimodal and row steps are cheap.
const X_STEPS: usize = 3;

/// A chain's state plus the caches that make each update cheap.
#[derive(Debug, Clone)]
pub struct MvgpChain {
    pub state: MvgpState,
    basis: LatentBasis,
    /// `Z η*`, `N × d`.
    w: DMatrix<f64>,
    cf: CovFactor,
    eps_cf: Option<CovFactor>,
    row_ll: Vec<f64>,
    adapt_phi: AdaptState,
    adapt_tau: AdaptState,
    adapt_rho: AdaptState,
    adapt_eps_phi: AdaptState,
    adapt_eps_tau: AdaptState,
    adapt_phi_centered: AdaptState,
    adapt_tau_centered: AdaptState,
    adapt_shift: Vec<AdaptState>,
    adapt_rho_white: AdaptState,
    adapt_ridge: AdaptState,
    adapt_ridge_centered: AdaptState,
    /// Counted flops per stage, accumulated over all sweeps.
    pub stage_flops: [u64; 8],
    pub sweeps: u64,
}

impl MvgpChain {
    pub fn new(model: &MvgpModel, state: MvgpState) -> Result<Self> {
        let basis = model.build_basis(&state)?;
        let d = model.n_species();
        let b = state.vine.phi.len();
        let cf = state.cov_factor();
        let eps_cf = state
            .overdisp
            .as_ref()
            .map(|o| cov_factor(&o.vine, &o.scales));
        let mut chain = Self {
            w: DMatrix::zeros(model.n_rows(), d),
            basis,
            cf,
            eps_cf,
            row_ll: vec![0.0; model.n_rows()],
            adapt_phi: AdaptState::new(b, (0.05f64).ln()),
            adapt_tau: AdaptState::new(d, (0.1f64).ln()),
            adapt_rho: AdaptState::new(1, (0.2f64).ln()),
            adapt_eps_phi: AdaptState::new(b, (0.05f64).ln()),
            adapt_eps_tau: AdaptState::new(d, (0.1f64).ln()),
            adapt_phi_centered: AdaptState::new(b, (0.05f64).ln()),
            adapt_tau_centered: AdaptState::new(d, (0.1f64).ln()),
            adapt_shift: (0..d).map(|_| AdaptState::new(1, (0.1f64).ln())).collect(),
            adapt_rho_white: AdaptState::new(1, (0.2f64).ln()),
            adapt_ridge: AdaptState::new(1, (0.2f64).ln()),
            adapt_ridge_centered: AdaptState::new(1, (0.5f64).ln()),
            stage_flops: [0; 8],
            sweeps: 0,
            state,
        };
        chain.refresh_w();
        chain.row_ll = chain.all_rows(
            model,
            chain.state.mu.as_slice(),
            &chain.cf.r,
            &chain.w,
            chain.eps(),
        );
        let total = chain.loglik();
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "initial log-likelihood is {total}"
            )));
        }
        Ok(chain)
    }

    pub fn basis(&self) -> &LatentBasis {
        &self.basis
    }

    /// Sum of the per-row likelihood kernels, in row order.
    pub fn loglik(&self) -> f64 {
        self.row_ll.iter().sum()
    }

    /// Block names with their realized acceptance rates.
    pub fn acceptance_rates(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("phi".to_string(), self.adapt_phi.acceptance_rate()),
            ("tau2".to_string(), self.adapt_tau.acceptance_rate()),
            ("rho".to_string(), self.adapt_rho.acceptance_rate()),
            (
                "phi_centered".to_string(),
                self.adapt_phi_centered.acceptance_rate(),
            ),
            (
                "tau2_centered".to_string(),
                self.adapt_tau_centered.acceptance_rate(),
            ),
            (
                "rho_whitened".to_string(),
                self.adapt_rho_white.acceptance_rate(),
            ),
            (
                "rho_tau_ridge".to_string(),
                self.adapt_ridge.acceptance_rate(),
            ),
            (
                "rho_tau_ridge_centered".to_string(),
                self.adapt_ridge_centered.acceptance_rate(),
            ),
        ];
        for (j, a) in self.adapt_shift.iter().enumerate() {
            v.push((format!("mu_shift[{j}]"), a.acceptance_rate()));
        }
        if self.state.overdisp.is_some() {
            v.push(("eps_phi".to_string(), self.adapt_eps_phi.acceptance_rate()));
            v.push(("eps_tau2".to_string(), self.adapt_eps_tau.acceptance_rate()));
        }
        v
    }

    fn eps(&self) -> Option<&DMatrix<f64>> {
        self.state.overdisp.as_ref().map(|o| &o.eps)
    }

    fn refresh_w(&mut self) {
        self.w = compute_w(self.basis.rows(), &self.state.eta_star);
    }

    fn all_rows(
        &self,
        model: &MvgpModel,
        mu: &[f64],
        r: &DMatrix<f64>,
        w: &DMatrix<f64>,
        eps: Option<&DMatrix<f64>>,
    ) -> Vec<f64> {
        rows_loglik(model, mu, r, w, eps)
    }

    fn dump(&self, stage: &str, message: &str) -> Error {
        let flat: Vec<String> = self
            .state
            .flat()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("eta["))
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        Error::Model(format!(
            "{stage} update failed: {message}; state: {}",
            flat.join(", ")
        ))
    }

    /// One full scan in the fixed order η*, μ, φ, τ², λ, ρ, x̃, overdispersion.
    ///
    /// Besides the basic updates, each scan interweaves moves that leave the
    /// latent field unchanged or nearly so: a joint shift of `μ_j` against
    /// the field's level, `(φ, τ²)` updates holding the knot values `η* R`
    /// fixed, and a `ρ` update holding the whitened coefficients fixed. These
    /// target the same posterior but cut the strong coupling between the
    /// covariance parameters and the field.
    pub fn sweep(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        cfg: &ChainConfig,
        opts: &SweepOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let adapt_until = cfg.adapt_until;
        for _ in 0..ETA_STEPS {
            self.stage_eta(model, rng)?;
        }
        for _ in 0..HYPER_PASSES {
            self.stage_mu(model, rng)?;
            self.stage_mu_shift(model, iteration, adapt_until, rng)?;
            self.stage_phi(model, iteration, adapt_until, rng);
            self.stage_tau(model, iteration, adapt_until, rng);
            self.stage_cov_centered(model, iteration, adapt_until, rng)?;
            self.stage_lambda(rng);
            if model.kernel_family().is_some() {
                self.stage_rho(model, iteration, adapt_until, rng)?;
                self.stage_rho_whitened(model, iteration, adapt_until, rng)?;
                self.stage_rho_tau_ridge(model, iteration, adapt_until, rng)?;
                self.stage_rho_tau_ridge_centered(model, iteration, adapt_until, rng)?;
            }
        }
        self.stage_x(model, opts, rng)?;
        if self.state.overdisp.is_some() {
            self.stage_overdisp(model, iteration, adapt_until, rng)?;
        }
        self.sweeps += 1;
        let ll = self.loglik();
        if !ll.is_finite() {
            return Err(self.dump("sweep", &format!("log-likelihood became {ll}")));
        }
        Ok(())
    }

    fn flops_now(&self) -> u64 {
        self.basis.flops().map(|f| f.get()).unwrap_or(0)
    }

    fn stage_eta(&mut self, model: &MvgpModel, rng: &mut ChaCha8Rng) -> Result<()> {
        let f0 = self.flops_now();
        let n = model.n_rows();
        let nb = self.basis.n_basis();
        let d = model.n_species();
        let upper = self.basis.prior_upper();
        let mut extra = 0u64;
        for j in 0..d {
            let cur = self.state.eta_star.column(j).into_owned();
            let mut w_try = self.w.clone();
            let mut ll_try = vec![0.0; n];
            let mu = self.state.mu.clone();
            let r = self.cf.r.clone();
            let z = self.basis.rows();
            let eps = self.eps();
            let mut evals = 0u64;
            let out = ess_step_with(
                &cur,
                self.loglik(),
                &upper,
                |v| {
                    evals += 1;
                    for i in 0..n {
                        let mut s = 0.0;
                        for m in 0..nb {
                            s += z[(i, m)] * v[m];
                        }
                        w_try[(i, j)] = s;
                    }
                    ll_try = rows_loglik(model, mu.as_slice(), &r, &w_try, eps);
                    ll_try.iter().sum()
                },
                rng,
            )
            .map_err(|e| self.dump("eta", &e.to_string()))?;
            extra += evals * (2 * n * nb) as u64 + (nb * nb) as u64;
            if out.moved {
                self.state.eta_star.set_column(j, &out.value);
                self.w = w_try;
                self.row_ll = ll_try;
            }
        }
        self.stage_flops[0] += self.flops_now() - f0 + extra;
        Ok(())
    }

    fn stage_mu(&mut self, model: &MvgpModel, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = model.n_species();
        let sd = model.config().priors.mu_sd;
        let upper = DMatrix::from_diagonal_element(d, d, sd);
        let mut ll_try = Vec::new();
        let r = &self.cf.r;
        let w = &self.w;
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let out = ess_step_with(
            &self.state.mu,
            self.row_ll.iter().sum(),
            &upper,
            |v| {
                ll_try = rows_loglik(model, v.as_slice(), r, w, eps);
                ll_try.iter().sum()
            },
            rng,
        )
        .map_err(|e| self.dump("mu", &e.to_string()))?;
        if out.moved {
            self.state.mu = out.value;
            self.row_ll = ll_try;
        }
        Ok(())
    }

    fn stage_phi(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) {
        if self.state.vine.phi.is_empty() {
            return;
        }
        let psi = self.state.vine.psi.clone();
        let scales = self.state.scales.clone();
        let mu = self.state.mu.clone();
        let mut ll_try = Vec::new();
        let mut cf_try = None;
        let w = &self.w;
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let cur_lp = self.loglik() + log_prior_phi(&self.state.vine);
        let out = arwm_step(
            &self.state.vine.phi,
            cur_lp,
            |phi| {
                let v = VineAngles {
                    phi: phi.to_vec(),
                    psi: psi.clone(),
                };
                let cf = cov_factor(&v, &scales);
                ll_try = rows_loglik(model, mu.as_slice(), &cf.r, w, eps);
                cf_try = Some(cf);
                ll_try.iter().sum::<f64>() + log_prior_phi(&v)
            },
            &mut self.adapt_phi,
            Transform::Logit {
                lower: -1.0,
                upper: 1.0,
            },
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            self.state.vine.phi = out.value;
            self.cf = cf_try.expect("accepted proposal was evaluated");
            self.row_ll = ll_try;
        }
    }

    fn stage_tau(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let vine = self.state.vine.clone();
        let lambda = self.state.scales.lambda.clone();
        let s = self.state.scales.s.clone();
        let mu = self.state.mu.clone();
        let mut ll_try = Vec::new();
        let mut cf_try = None;
        let w = &self.w;
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let cur_lp = self.loglik() + self.state.scales.log_prior_tau2();
        let out = arwm_step(
            &self.state.scales.tau2,
            cur_lp,
            |tau2| {
                let sm = ScaleMixture {
                    tau2: tau2.to_vec(),
                    lambda: lambda.clone(),
                    s: s.clone(),
                };
                let cf = cov_factor(&vine, &sm);
                ll_try = rows_loglik(model, mu.as_slice(), &cf.r, w, eps);
                cf_try = Some(cf);
                ll_try.iter().sum::<f64>() + sm.log_prior_tau2()
            },
            &mut self.adapt_tau,
            Transform::Log,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            self.state.scales.tau2 = out.value;
            self.cf = cf_try.expect("accepted proposal was evaluated");
            self.row_ll = ll_try;
        }
    }

    fn stage_lambda(&mut self, rng: &mut ChaCha8Rng) {
        self.state.scales.lambda = sample_lambda_given_tau2(&self.state.scales, rng);
    }

    fn stage_rho(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let f0 = self.flops_now();
        let priors = model.config().priors;
        let d = model.n_species();
        let mu = self.state.mu.clone();
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let coef_prior = |basis: &LatentBasis, eta: &DMatrix<f64>| -> f64 {
            (0..d)
                .map(|j| basis.coef_log_prior(&eta.column(j).into_owned()))
                .sum()
        };
        let cur_lp = self.loglik()
            + coef_prior(&self.basis, &self.state.eta_star)
            + priors.log_prior_rho(self.state.rho);
        let mut proposal: Option<(LatentBasis, DMatrix<f64>, Vec<f64>)> = None;
        let mut extra = 0u64;
        let state = &self.state;
        let r = &self.cf.r;
        let out = arwm_step(
            &[self.state.rho],
            cur_lp,
            |rho| {
                let lp_rho = priors.log_prior_rho(rho[0]);
                if !lp_rho.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let Ok(basis) = model.build_basis_at(state, rho[0]) else {
                    return f64::NEG_INFINITY;
                };
                let w = compute_w(basis.rows(), &state.eta_star);
                let ll = rows_loglik(model, mu.as_slice(), r, &w, eps);
                let lp = ll.iter().sum::<f64>() + coef_prior(&basis, &state.eta_star) + lp_rho;
                extra += basis.flops().map(|f| f.get()).unwrap_or(0)
                    + (2 * w.nrows() * basis.n_basis() * d) as u64;
                proposal = Some((basis, w, ll));
                lp
            },
            &mut self.adapt_rho,
            Transform::Log,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            let (mut basis, w, ll) = proposal.expect("accepted proposal was evaluated");
            basis.set_version(self.state.x_version());
            // keep one running tally across rebuilds
            if let (Some(old), Some(new)) = (self.basis.flops(), basis.flops()) {
                new.reset();
                new.add(old.get());
            }
            self.basis = basis;
            self.w = w;
            self.row_ll = ll;
            self.state.rho = out.value[0];
        }
        self.stage_flops[5] += self.flops_now() - f0 + extra;
        Ok(())
    }

    /// Moves `μ_j` by `δ` while moving the knot values of species `j` by
    /// `−δ`, so only the part of the shift the basis cannot represent
    /// reaches the likelihood (none for a spline basis).
    fn stage_mu_shift(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = model.n_rows();
        let d = model.n_species();
        let nb = self.basis.n_basis();
        let up = self.basis.prior_upper();
        let ones = DVector::from_element(nb, 1.0);
        let y = up
            .tr_solve_upper_triangular(&ones)
            .ok_or_else(|| self.dump("mu_shift", "singular coefficient prior"))?;
        let h = up
            .solve_upper_triangular(&y)
            .ok_or_else(|| self.dump("mu_shift", "singular coefficient prior"))?;
        let q = y.norm_squared();
        let zsum: Vec<f64> = (0..n).map(|i| self.basis.rows().row(i).sum()).collect();
        let rinv = self
            .cf
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| self.dump("mu_shift", "singular covariance factor"))?;
        let mut b = self.state.eta_star.tr_mul(&h);
        let sd = model.config().priors.mu_sd;
        let mut scratch = vec![0.0; d];
        let mut wrow = vec![0.0; d];
        for j in 0..d {
            let g: Vec<f64> = rinv.row(j).iter().copied().collect();
            let gb: f64 = g.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
            let gg: f64 = g.iter().map(|a| a * a).sum();
            let mu0 = self.state.mu[j];
            let mut ll_try = vec![0.0; n];
            let mut mu_try = self.state.mu.clone();
            let w = &self.w;
            let r = &self.cf.r;
            let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
            let row_ll = &self.row_ll;
            let mu_prior = |m: f64| -0.5 * (m / sd).powi(2);
            let out = arwm_step(
                &[mu0],
                mu_prior(mu0),
                |m| {
                    let delta = m[0] - mu0;
                    mu_try[j] = m[0];
                    let mut dll = 0.0;
                    for i in 0..n {
                        for k in 0..d {
                            wrow[k] = w[(i, k)] - delta * zsum[i] * g[k];
                        }
                        let e = eps.map(|e| e.row(i).iter().copied().collect::<Vec<f64>>());
                        ll_try[i] = model.row_loglik(
                            i,
                            mu_try.as_slice(),
                            r,
                            &wrow,
                            e.as_deref(),
                            &mut scratch,
                        );
                        dll += ll_try[i] - row_ll[i];
                    }
                    let dprior = delta * gb - 0.5 * delta * delta * q * gg;
                    mu_prior(m[0]) + dprior + dll
                },
                &mut self.adapt_shift[j],
                Transform::Identity,
                iteration,
                adapt_until,
                rng,
            );
            if out.accepted {
                let delta = out.value[0] - mu0;
                self.state.mu[j] = out.value[0];
                for k in 0..d {
                    for m in 0..nb {
                        self.state.eta_star[(m, k)] -= delta * g[k];
                    }
                    for i in 0..n {
                        self.w[(i, k)] -= delta * zsum[i] * g[k];
                    }
                    b[k] -= delta * q * g[k];
                }
                self.row_ll = ll_try;
            }
        }
        Ok(())
    }

    /// Updates `φ` then `τ²` with the knot values `U = η* R` held fixed.
    /// Only the coefficient prior and the Jacobian `|R|^{-ℓ}` enter, so each
    /// proposal costs O(d³); several are made per scan.
    fn stage_cov_centered(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        const REPEATS: usize = 40;
        let d = model.n_species();
        let up = self.basis.prior_upper();
        let v = up
            .tr_solve_upper_triangular(&self.state.eta_star)
            .ok_or_else(|| self.dump("cov_centered", "singular coefficient prior"))?;
        // A = η*ᵀ C⁻¹ η*
        let mut a = v.tr_mul(&v);
        let ell = self.basis.n_basis() as f64;
        let mut t_total = DMatrix::<f64>::identity(d, d);
        let mut moved = false;
        // log p(U | R) up to a constant, given T = R_cur R⁻¹ and A at R_cur
        let field_term = |a: &DMatrix<f64>,
                          r_cur: &DMatrix<f64>,
                          r_new: &DMatrix<f64>|
         -> Option<(f64, DMatrix<f64>)> {
            let rinv = r_new.clone().try_inverse()?;
            let t = r_cur * rinv;
            let quad = (t.transpose() * a * &t).trace();
            let logdet: f64 = (0..d).map(|i| r_new[(i, i)].abs().ln()).sum();
            Some((-0.5 * quad - ell * logdet, t))
        };
        for _ in 0..REPEATS {
            if !self.state.vine.phi.is_empty() {
                let r_cur = self.cf.r.clone();
                let cur_lp = -ell * (0..d).map(|i| r_cur[(i, i)].ln()).sum::<f64>()
                    - 0.5 * a.trace()
                    + log_prior_phi(&self.state.vine);
                let psi = self.state.vine.psi.clone();
                let scales = self.state.scales.clone();
                let mut accepted: Option<(CovFactor, DMatrix<f64>)> = None;
                let out = arwm_step(
                    &self.state.vine.phi,
                    cur_lp,
                    |phi| {
                        let vv = VineAngles {
                            phi: phi.to_vec(),
                            psi: psi.clone(),
                        };
                        let cf = cov_factor(&vv, &scales);
                        match field_term(&a, &r_cur, &cf.r) {
                            Some((lp, t)) => {
                                accepted = Some((cf, t));
                                lp + log_prior_phi(&vv)
                            }
                            None => f64::NEG_INFINITY,
                        }
                    },
                    &mut self.adapt_phi_centered,
                    Transform::Logit {
                        lower: -1.0,
                        upper: 1.0,
                    },
                    iteration,
                    adapt_until,
                    rng,
                );
                if out.accepted {
                    let (cf, t) = accepted.expect("accepted proposal was evaluated");
                    self.state.vine.phi = out.value;
                    a = t.transpose() * &a * &t;
                    t_total = &t_total * &t;
                    self.cf = cf;
                    moved = true;
                }
            }
            let r_cur = self.cf.r.clone();
            let cur_lp = -ell * (0..d).map(|i| r_cur[(i, i)].ln()).sum::<f64>() - 0.5 * a.trace()
                + self.state.scales.log_prior_tau2();
            let vine = self.state.vine.clone();
            let lambda = self.state.scales.lambda.clone();
            let s = self.state.scales.s.clone();
            let mut accepted: Option<(CovFactor, DMatrix<f64>)> = None;
            let out = arwm_step(
                &self.state.scales.tau2,
                cur_lp,
                |tau2| {
                    let sm = ScaleMixture {
                        tau2: tau2.to_vec(),
                        lambda: lambda.clone(),
                        s: s.clone(),
                    };
                    let cf = cov_factor(&vine, &sm);
                    match field_term(&a, &r_cur, &cf.r) {
                        Some((lp, t)) => {
                            accepted = Some((cf, t));
                            lp + sm.log_prior_tau2()
                        }
                        None => f64::NEG_INFINITY,
                    }
                },
                &mut self.adapt_tau_centered,
                Transform::Log,
                iteration,
                adapt_until,
                rng,
            );
            if out.accepted {
                let (cf, t) = accepted.expect("accepted proposal was evaluated");
                self.state.scales.tau2 = out.value;
                a = t.transpose() * &a * &t;
                t_total = &t_total * &t;
                self.cf = cf;
                moved = true;
            }
        }
        if moved {
            // the field Z η* R is unchanged; refresh caches exactly
            self.state.eta_star = &self.state.eta_star * &t_total;
            self.refresh_w();
            self.row_ll = self.all_rows(
                model,
                self.state.mu.as_slice(),
                &self.cf.r,
                &self.w,
                self.eps(),
            );
        }
        Ok(())
    }

    /// Random-walk on `ρ` holding `ν = U⁻ᵀ η*` fixed, where `Uᵀ U` is the
    /// knot correlation. The coefficient prior is then constant in `ρ`.
    fn stage_rho_whitened(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let f0 = self.flops_now();
        let priors = model.config().priors;
        let up = self.basis.prior_upper();
        let nu = up
            .tr_solve_upper_triangular(&self.state.eta_star)
            .ok_or_else(|| self.dump("rho", "singular knot correlation"))?;
        let cur_lp = self.loglik() + priors.log_prior_rho(self.state.rho);
        let mu = self.state.mu.clone();
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let state = &self.state;
        let r = &self.cf.r;
        let mut proposal: Option<(LatentBasis, DMatrix<f64>, DMatrix<f64>, Vec<f64>)> = None;
        let mut extra = 0u64;
        let out = arwm_step(
            &[self.state.rho],
            cur_lp,
            |rho| {
                let lp_rho = priors.log_prior_rho(rho[0]);
                if !lp_rho.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let Ok(basis) = model.build_basis_at(state, rho[0]) else {
                    return f64::NEG_INFINITY;
                };
                let eta = basis.prior_upper().tr_mul(&nu);
                let w = compute_w(basis.rows(), &eta);
                let ll = rows_loglik(model, mu.as_slice(), r, &w, eps);
                let lp = ll.iter().sum::<f64>() + lp_rho;
                extra += basis.flops().map(|f| f.get()).unwrap_or(0)
                    + (2 * w.nrows() * basis.n_basis() * w.ncols()) as u64;
                proposal = Some((basis, eta, w, ll));
                lp
            },
            &mut self.adapt_rho_white,
            Transform::Log,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            let (mut basis, eta, w, ll) = proposal.expect("accepted proposal was evaluated");
            basis.set_version(self.state.x_version());
            if let (Some(old), Some(new)) = (self.basis.flops(), basis.flops()) {
                new.reset();
                new.add(old.get());
            }
            self.basis = basis;
            self.state.eta_star = eta;
            self.w = w;
            self.row_ll = ll;
            self.state.rho = out.value[0];
        }
        self.stage_flops[5] += self.flops_now() - f0 + extra;
        Ok(())
    }

    /// Scales `ρ` and every `τ²_j` by a common factor `e^s`, whitened
    /// coefficients fixed. For exponential-type kernels the data mostly pin
    /// down `τ²/ρ`, so this moves along the ridge the single-parameter
    /// updates cross slowly.
    fn stage_rho_tau_ridge(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let f0 = self.flops_now();
        let priors = model.config().priors;
        let d = model.n_species() as f64;
        let up = self.basis.prior_upper();
        let nu = up
            .tr_solve_upper_triangular(&self.state.eta_star)
            .ok_or_else(|| self.dump("rho", "singular knot correlation"))?;
        let log_prior =
            |rho: f64, sm: &ScaleMixture| priors.log_prior_rho(rho) + sm.log_prior_tau2();
        let cur_lp = self.loglik() + log_prior(self.state.rho, &self.state.scales);
        let mu = self.state.mu.clone();
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let state = &self.state;
        let mut proposal: Option<(
            LatentBasis,
            DMatrix<f64>,
            DMatrix<f64>,
            Vec<f64>,
            CovFactor,
            ScaleMixture,
        )> = None;
        let mut extra = 0u64;
        let out = arwm_step(
            &[0.0],
            cur_lp,
            |sv| {
                let f = sv[0].exp();
                let rho = state.rho * f;
                let mut sm = state.scales.clone();
                for t in sm.tau2.iter_mut() {
                    *t *= f;
                }
                let lp = log_prior(rho, &sm);
                if !lp.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let Ok(basis) = model.build_basis_at(state, rho) else {
                    return f64::NEG_INFINITY;
                };
                let cf = cov_factor(&state.vine, &sm);
                let eta = basis.prior_upper().tr_mul(&nu);
                let w = compute_w(basis.rows(), &eta);
                let ll = rows_loglik(model, mu.as_slice(), &cf.r, &w, eps);
                let total = ll.iter().sum::<f64>() + lp + (d + 1.0) * sv[0];
                extra += basis.flops().map(|f| f.get()).unwrap_or(0)
                    + (2 * w.nrows() * basis.n_basis() * w.ncols()) as u64;
                proposal = Some((basis, eta, w, ll, cf, sm));
                total
            },
            &mut self.adapt_ridge,
            Transform::Identity,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            let (mut basis, eta, w, ll, cf, sm) =
                proposal.expect("accepted proposal was evaluated");
            basis.set_version(self.state.x_version());
            if let (Some(old), Some(new)) = (self.basis.flops(), basis.flops()) {
                new.reset();
                new.add(old.get());
            }
            self.state.rho *= out.value[0].exp();
            self.state.scales = sm;
            self.cf = cf;
            self.basis = basis;
            self.state.eta_star = eta;
            self.w = w;
            self.row_ll = ll;
        }
        self.stage_flops[5] += self.flops_now() - f0 + extra;
        Ok(())
    }

    /// The ridge move of [`Self::stage_rho_tau_ridge`] with the knot values
    /// `U = η* R` held fixed instead; the likelihood then changes only
    /// through interpolation between knots.
    fn stage_rho_tau_ridge_centered(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let f0 = self.flops_now();
        let priors = model.config().priors;
        let d = model.n_species();
        let ell = self.basis.n_basis() as f64;
        let log_prior =
            |rho: f64, sm: &ScaleMixture| priors.log_prior_rho(rho) + sm.log_prior_tau2();
        let coef_prior = |basis: &LatentBasis, eta: &DMatrix<f64>| -> f64 {
            (0..d)
                .map(|j| basis.coef_log_prior(&eta.column(j).into_owned()))
                .sum()
        };
        let log_jac = |r: &DMatrix<f64>| -ell * (0..d).map(|i| r[(i, i)].ln()).sum::<f64>();
        let cur_lp = self.loglik()
            + log_prior(self.state.rho, &self.state.scales)
            + coef_prior(&self.basis, &self.state.eta_star)
            + log_jac(&self.cf.r);
        let u = &self.state.eta_star * &self.cf.r;
        let mu = self.state.mu.clone();
        let eps = self.state.overdisp.as_ref().map(|o| &o.eps);
        let state = &self.state;
        let mut proposal: Option<(
            LatentBasis,
            DMatrix<f64>,
            DMatrix<f64>,
            Vec<f64>,
            CovFactor,
            ScaleMixture,
        )> = None;
        let mut extra = 0u64;
        let out = arwm_step(
            &[0.0],
            cur_lp,
            |sv| {
                let f = sv[0].exp();
                let rho = state.rho * f;
                let mut sm = state.scales.clone();
                for t in sm.tau2.iter_mut() {
                    *t *= f;
                }
                let lp = log_prior(rho, &sm);
                if !lp.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let Ok(basis) = model.build_basis_at(state, rho) else {
                    return f64::NEG_INFINITY;
                };
                let cf = cov_factor(&state.vine, &sm);
                let Some(rinv) = cf.r.clone().try_inverse() else {
                    return f64::NEG_INFINITY;
                };
                let eta = &u * rinv;
                let w = compute_w(basis.rows(), &eta);
                let ll = rows_loglik(model, mu.as_slice(), &cf.r, &w, eps);
                let total = ll.iter().sum::<f64>()
                    + lp
                    + coef_prior(&basis, &eta)
                    + log_jac(&cf.r)
                    + (d as f64 + 1.0) * sv[0];
                extra += basis.flops().map(|f| f.get()).unwrap_or(0)
                    + (2 * w.nrows() * basis.n_basis() * d) as u64;
                proposal = Some((basis, eta, w, ll, cf, sm));
                total
            },
            &mut self.adapt_ridge_centered,
            Transform::Identity,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            let (mut basis, eta, w, ll, cf, sm) =
                proposal.expect("accepted proposal was evaluated");
            basis.set_version(self.state.x_version());
            if let (Some(old), Some(new)) = (self.basis.flops(), basis.flops()) {
                new.reset();
                new.add(old.get());
            }
            self.state.rho *= out.value[0].exp();
            self.state.scales = sm;
            self.cf = cf;
            self.basis = basis;
            self.state.eta_star = eta;
            self.w = w;
            self.row_ll = ll;
        }
        self.stage_flops[5] += self.flops_now() - f0 + extra;
        Ok(())
    }

    fn stage_x(
        &mut self,
        model: &MvgpModel,
        opts: &SweepOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let f0 = self.flops_now();
        let xp = *model.xprior();
        let mean = DVector::from_element(1, xp.mean);
        let upper = DMatrix::from_element(1, 1, xp.sd());
        let d = model.n_species();
        let nb = self.basis.n_basis();
        let mut scratch = vec![0.0; d];
        let mut extra = 0u64;
        for (k, &i) in model.missing_rows().iter().enumerate() {
            for _ in 0..X_STEPS {
                let cur = DVector::from_element(1, self.state.x_missing()[k]);
                let mu = self.state.mu.clone();
                let r = &self.cf.r;
                let eps_row: Option<Vec<f64>> = self
                    .state
                    .overdisp
                    .as_ref()
                    .map(|o| o.eps.row(i).iter().copied().collect());
                match opts.x_update {
                    XUpdateMode::RowLocal => {
                        let mut last: Option<(DVector<f64>, Vec<f64>, f64)> = None;
                        let basis = &self.basis;
                        let eta = &self.state.eta_star;
                        let out = ess_step_centered(
                            &cur,
                            self.row_ll[i],
                            &mean,
                            &upper,
                            |x| {
                                extra += (2 * nb * d) as u64;
                                let Some(z) = basis.row_at(x[0]) else {
                                    return f64::NEG_INFINITY;
                                };
                                let w = MvgpModel::w_from_z(z.as_slice(), eta);
                                let ll = model.row_loglik(
                                    i,
                                    mu.as_slice(),
                                    r,
                                    &w,
                                    eps_row.as_deref(),
                                    &mut scratch,
                                );
                                last = Some((z, w, ll));
                                ll
                            },
                            rng,
                        )
                        .map_err(|e| self.dump("x", &e.to_string()))?;
                        if out.moved {
                            let (z, w, ll) = last.expect("accepted proposal was evaluated");
                            self.state.set_x_missing(k, out.value[0]);
                            debug_assert_eq!(self.basis.row_at(out.value[0]).as_ref(), Some(&z));
                            self.basis.replace_row(i, out.value[0])?;
                            self.basis.set_version(self.state.x_version());
                            for (jj, v) in w.iter().enumerate() {
                                self.w[(i, jj)] = *v;
                            }
                            self.row_ll[i] = ll;
                        }
                    }
                    XUpdateMode::FullRebuild => {
                        let mut last: Option<(LatentBasis, DMatrix<f64>, Vec<f64>)> = None;
                        let state = &self.state;
                        let eps = state.overdisp.as_ref().map(|o| &o.eps);
                        let out = ess_step_centered(
                            &cur,
                            self.row_ll[i],
                            &mean,
                            &upper,
                            |x| {
                                let mut trial = state.clone();
                                trial.set_x_missing(k, x[0]);
                                let Ok(basis) = model.build_basis(&trial) else {
                                    return f64::NEG_INFINITY;
                                };
                                let w = compute_w(basis.rows(), &trial.eta_star);
                                let ll = rows_loglik(model, mu.as_slice(), r, &w, eps);
                                let li = ll[i];
                                last = Some((basis, w, ll));
                                li
                            },
                            rng,
                        )
                        .map_err(|e| self.dump("x", &e.to_string()))?;
                        if out.moved {
                            let (mut basis, w, ll) = last.expect("accepted proposal was evaluated");
                            self.state.set_x_missing(k, out.value[0]);
                            basis.set_version(self.state.x_version());
                            self.basis = basis;
                            self.w = w;
                            self.row_ll = ll;
                        }
                    }
                }
            }
        }
        self.stage_flops[6] += self.flops_now().saturating_sub(f0) + extra;
        Ok(())
    }

    fn stage_overdisp(
        &mut self,
        model: &MvgpModel,
        iteration: usize,
        adapt_until: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let d = model.n_species();
        let mut scratch = vec![0.0; d];
        // (a) residuals, one ESS block per row
        let eps_cf = self.eps_cf.clone().expect("overdispersion enabled");
        for i in 0..model.n_rows() {
            let od = self
                .state
                .overdisp
                .as_ref()
                .expect("overdispersion enabled");
            let cur = od.eps.row(i).transpose();
            let w: Vec<f64> = self.w.row(i).iter().copied().collect();
            let mu = &self.state.mu;
            let r = &self.cf.r;
            let mut last_ll = 0.0;
            let out = ess_step_with(
                &cur,
                self.row_ll[i],
                &eps_cf.r,
                |e| {
                    last_ll =
                        model.row_loglik(i, mu.as_slice(), r, &w, Some(e.as_slice()), &mut scratch);
                    last_ll
                },
                rng,
            )
            .map_err(|e| self.dump("eps", &e.to_string()))?;
            if out.moved {
                let od = self
                    .state
                    .overdisp
                    .as_mut()
                    .expect("overdispersion enabled");
                od.eps.set_row(i, &out.value.transpose());
                self.row_ll[i] = last_ll;
            }
        }
        let od = self
            .state
            .overdisp
            .as_mut()
            .expect("overdispersion enabled");
        // (b) partial correlations of Σ_ε
        if !od.vine.phi.is_empty() {
            let psi = od.vine.psi.clone();
            let scales = od.scales.clone();
            let eps = &od.eps;
            let cur_lp = mvn_logpdf_rows_upper(eps, &self.eps_cf.as_ref().unwrap().r)
                + log_prior_phi(&od.vine);
            let out = arwm_step(
                &od.vine.phi,
                cur_lp,
                |phi| {
                    let v = VineAngles {
                        phi: phi.to_vec(),
                        psi: psi.clone(),
                    };
                    let cf = cov_factor(&v, &scales);
                    mvn_logpdf_rows_upper(eps, &cf.r) + log_prior_phi(&v)
                },
                &mut self.adapt_eps_phi,
                Transform::Logit {
                    lower: -1.0,
                    upper: 1.0,
                },
                iteration,
                adapt_until,
                rng,
            );
            if out.accepted {
                od.vine.phi = out.value;
            }
        }
        // (c) variances
        let vine = od.vine.clone();
        let lambda = od.scales.lambda.clone();
        let s = od.scales.s.clone();
        let eps = &od.eps;
        let cur_cf = cov_factor(&od.vine, &od.scales);
        let cur_lp = mvn_logpdf_rows_upper(eps, &cur_cf.r) + od.scales.log_prior_tau2();
        let out = arwm_step(
            &od.scales.tau2,
            cur_lp,
            |tau2| {
                let sm = ScaleMixture {
                    tau2: tau2.to_vec(),
                    lambda: lambda.clone(),
                    s: s.clone(),
                };
                mvn_logpdf_rows_upper(eps, &cov_factor(&vine, &sm).r) + sm.log_prior_tau2()
            },
            &mut self.adapt_eps_tau,
            Transform::Log,
            iteration,
            adapt_until,
            rng,
        );
        if out.accepted {
            od.scales.tau2 = out.value;
        }
        // (d) mixing rates
        od.scales.lambda = sample_lambda_given_tau2(&od.scales, rng);
        self.eps_cf = Some(cov_factor(&od.vine, &od.scales));
        Ok(())
    }
}

/// `Z η*` with the same summation order as single-row updates.
pub(crate) fn compute_w(z: &DMatrix<f64>, eta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let d = eta.ncols();
    let mut w = DMatrix::zeros(n, d);
    for i in 0..n {
        let row = MvgpModel::w_row(z, i, eta);
        for j in 0..d {
            w[(i, j)] = row[j];
        }
    }
    w
}

/// Per-row likelihood kernels for given `μ`, `R`, `W`, `ε`.
pub(crate) fn rows_loglik(
    model: &MvgpModel,
    mu: &[f64],
    r: &DMatrix<f64>,
    w: &DMatrix<f64>,
    eps: Option<&DMatrix<f64>>,
) -> Vec<f64> {
    let d = mu.len();
    let mut scratch = vec![0.0; d];
    let mut wrow = vec![0.0; d];
    let mut erow = vec![0.0; d];
    (0..w.nrows())
        .map(|i| {
            for j in 0..d {
                wrow[j] = w[(i, j)];
            }
            let e = eps.map(|e| {
                for j in 0..d {
                    erow[j] = e[(i, j)];
                }
                erow.as_slice()
            });
            model.row_loglik(i, mu, r, &wrow, e, &mut scratch)
        })
        .collect()
}

/// Drives [`MvgpChain`] through [`run_chains`](super::run_chains).
pub struct MvgpSampler<'a> {
    pub model: &'a MvgpModel,
    pub options: SweepOptions,
}

impl<'a> MvgpSampler<'a> {
    pub fn new(model: &'a MvgpModel) -> Self {
        Self {
            model,
            options: SweepOptions::default(),
        }
    }
}

impl ChainKernel for MvgpSampler<'_> {
    type State = MvgpChain;
    type Draw = MvgpState;

    fn init(&self, chain: usize, rng: &mut ChaCha8Rng) -> Result<MvgpChain> {
        let st = self.model.initial_state(chain, rng);
        MvgpChain::new(self.model, st)
    }

    fn sweep(
        &self,
        st: &mut MvgpChain,
        iteration: usize,
        cfg: &ChainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        st.sweep(self.model, iteration, cfg, &self.options, rng)
    }

    fn snapshot(&self, st: &MvgpChain) -> MvgpState {
        st.state.clone()
    }
}

/// Posterior draws plus the diagnostics recorded in run manifests.
#[derive(Debug, Clone)]
pub struct MvgpFit {
    pub samples: PosteriorSamples<MvgpState>,
    /// Per chain: block name → acceptance rate.
    pub acceptance: Vec<Vec<(String, f64)>>,
    /// Split-R̂ of the monitored parameters (μ, τ, φ, ρ, x̃); empty with
    /// fewer than two chains or ten draws.
    pub rhat: Vec<(String, f64)>,
    pub clamp_events: u64,
    pub stage_flops: Vec<[u64; 8]>,
}

impl MvgpFit {
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat
            .iter()
            .map(|(_, r)| *r)
            .fold(None, |a, r| Some(a.map_or(r, |m: f64| m.max(r))))
    }

    /// Pooled draws of missing covariate `k` on the working scale.
    pub fn x_draws(&self, k: usize) -> Vec<f64> {
        self.samples.pooled().map(|s| s.x_missing()[k]).collect()
    }

    /// Posterior mean of the expected relative abundance `α_j / Σ α` at each
    /// point of `grid` (working scale), overdispersion excluded;
    /// `grid × species`.
    pub fn response_curves(&self, model: &MvgpModel, grid: &[f64]) -> Result<DMatrix<f64>> {
        let d = model.n_species();
        let mut out = DMatrix::zeros(grid.len(), d);
        let mut log_alpha = vec![0.0; d];
        let mut n = 0usize;
        for state in self.samples.pooled() {
            let basis = model.build_basis(state)?;
            let r = state.cov_factor().r;
            for (g, &x) in grid.iter().enumerate() {
                let z = basis.row_at(x).ok_or_else(|| {
                    Error::invalid_arg(format!("grid point {x} is outside the basis span"))
                })?;
                let w = MvgpModel::w_from_z(z.as_slice(), &state.eta_star);
                MvgpModel::log_alpha_into(state.mu.as_slice(), &r, &w, None, &mut log_alpha);
                let top = log_alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = log_alpha.iter().map(|v| (v - top).exp()).sum();
                for j in 0..d {
                    out[(g, j)] += (log_alpha[j] - top).exp() / total;
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid_arg("no retained draws"));
        }
        Ok(out / n as f64)
    }

    /// Posterior mean of the cross-species correlation matrix.
    pub fn mean_correlation(&self) -> DMatrix<f64> {
        let mut acc: Option<DMatrix<f64>> = None;
        let mut n = 0usize;
        for state in self.samples.pooled() {
            let c = state.cov_factor().correlation();
            acc = Some(match acc {
                Some(a) => a + c,
                None => c,
            });
            n += 1;
        }
        acc.map(|a| a / n as f64).unwrap_or_else(|| DMatrix::zeros(0, 0))
    }
}

/// Names whose R̂ is monitored.
pub fn is_monitored(name: &str) -> bool {
    name.starts_with("mu[")
        || name.starts_with("tau[")
        || name.starts_with("phi[")
        || name == "rho"
        || name.starts_with("x[")
}

pub fn fit_mvgp(model: &MvgpModel, cfg: &ChainConfig, options: SweepOptions) -> Result<MvgpFit> {
    let sampler = MvgpSampler { model, options };
    let (samples, states) = run_chains_with_states(&sampler, cfg)?;
    let rhat = if cfg.chains >= 2 && cfg.retained() >= 10 {
        let is_gam = model.config().is_gam();
        gelman_rubin_all(&samples, |n| is_monitored(n) && !(is_gam && n == "rho"))?
    } else {
        Vec::new()
    };
    Ok(MvgpFit {
        acceptance: states.iter().map(|s| s.acceptance_rates()).collect(),
        stage_flops: states.iter().map(|s| s.stage_flops).collect(),
        clamp_events: model.clamp_events(),
        samples,
        rhat,
    })
}
