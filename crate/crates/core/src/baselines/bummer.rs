use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{mean_sd, CompositionMatrix};
use crate::error::{Error, Result};
use crate::mvgp::{dm_kernel, ln_rising, XPrior, LOG_ALPHA_CLAMP};
use crate::sampler::{
    arwm_step, ess_step_centered, gelman_rubin_all, run_chains_with_states, AdaptState,
    ChainConfig, ChainKernel, FlatParams, PosteriorSamples, Transform,
};

/// Gaussian-kernel response: `ln α_j(x) = a_j − (b_j − x)² / (2 c²_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BummerParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c2: Vec<f64>,
}

impl BummerParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c2: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() != c2.len() || a.is_empty() {
            return Err(Error::invalid_arg(
                "a, b and c2 must have the same nonzero length",
            ));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::invalid_arg("a and b must be finite"));
        }
        if let Some(bad) = c2.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::invalid_arg(format!(
                "spread c2 = {bad} must be positive"
            )));
        }
        Ok(Self { a, b, c2 })
    }

    pub fn n_species(&self) -> usize {
        self.a.len()
    }

    pub fn log_alpha(&self, x: f64) -> Vec<f64> {
        (0..self.a.len()).map(|j| self.log_alpha_j(j, x)).collect()
    }

    fn log_alpha_j(&self, j: usize, x: f64) -> f64 {
        let v = self.a[j] - (self.b[j] - x).powi(2) / (2.0 * self.c2[j]);
        v.clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
    }
}

impl FlatParams for BummerParams {
    fn flat(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(3 * self.a.len());
        for (j, v) in self.a.iter().enumerate() {
            out.push((format!("a[{j}]"), *v));
        }
        for (j, v) in self.b.iter().enumerate() {
            out.push((format!("b[{j}]"), *v));
        }
        for (j, v) in self.c2.iter().enumerate() {
            out.push((format!("c2[{j}]"), *v));
        }
        out
    }
}

/// Priors on the standardized covariate scale: `a ~ N(0, a_sd²)`,
/// `b ~ N(0, b_sd²)`, `ln c² ~ N(0, log_c2_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BummerPriors {
    pub a_sd: f64,
    pub b_sd: f64,
    pub log_c2_sd: f64,
}

impl Default for BummerPriors {
    fn default() -> Self {
        Self {
            a_sd: 5.0,
            b_sd: 2.0,
            log_c2_sd: 2.0,
        }
    }
}

impl BummerPriors {
    fn log_density(&self, theta: &[f64]) -> f64 {
        let n = |v: f64, s: f64| -0.5 * (v / s).powi(2);
        n(theta[0], self.a_sd) + n(theta[1], self.b_sd) + n(theta[2], self.log_c2_sd)
    }
}

struct BummerKernel<'a> {
    y: &'a CompositionMatrix,
    z: Vec<f64>,
    x_mean: f64,
    x_sd: f64,
    priors: BummerPriors,
}

/// Working-scale parameters `(a, b, ln c²)` per species, with α caches.
struct BummerChain {
    theta: Vec<[f64; 3]>,
    /// `N × d` current α.
    alpha: DMatrix<f64>,
    alpha_sum: Vec<f64>,
    adapt: Vec<AdaptState>,
    scratch: Vec<f64>,
}

impl BummerKernel<'_> {
    fn log_alpha(theta: &[f64], z: f64) -> f64 {
        let v = theta[0] - (theta[1] - z).powi(2) / (2.0 * theta[2].exp());
        v.clamp(-LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
    }

    fn to_params(&self, theta: &[[f64; 3]]) -> BummerParams {
        BummerParams {
            a: theta.iter().map(|t| t[0]).collect(),
            b: theta
                .iter()
                .map(|t| self.x_mean + self.x_sd * t[1])
                .collect(),
            c2: theta
                .iter()
                .map(|t| t[2].exp() * self.x_sd * self.x_sd)
                .collect(),
        }
    }
}

impl ChainKernel for BummerKernel<'_> {
    type State = BummerChain;
    type Draw = BummerParams;

    fn init(&self, chain: usize, rng: &mut ChaCha8Rng) -> Result<BummerChain> {
        let n = self.y.n_rows();
        let d = self.y.n_species();
        let props = self.y.proportions();
        let jitter = if chain == 0 { 0.0 } else { 0.3 };
        let theta: Vec<[f64; 3]> = (0..d)
            .map(|j| {
                let w: f64 = props.iter().map(|r| r[j]).sum();
                let mean_p = (w / n as f64).max(1e-3);
                let opt = if w > 0.0 {
                    props
                        .iter()
                        .zip(&self.z)
                        .map(|(r, z)| r[j] * z)
                        .sum::<f64>()
                        / w
                } else {
                    0.0
                };
                let mut e = || jitter * rng.sample::<f64, _>(StandardNormal);
                [mean_p.ln() + 2.0 + e(), opt + e(), e()]
            })
            .collect();
        let alpha = DMatrix::from_fn(n, d, |i, j| Self::log_alpha(&theta[j], self.z[i]).exp());
        let alpha_sum = (0..n).map(|i| alpha.row(i).sum()).collect();
        Ok(BummerChain {
            theta,
            alpha,
            alpha_sum,
            adapt: (0..d).map(|_| AdaptState::new(3, (0.1f64).ln())).collect(),
            scratch: vec![0.0; n],
        })
    }

    fn sweep(
        &self,
        st: &mut BummerChain,
        iteration: usize,
        cfg: &ChainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = self.y.n_rows();
        for j in 0..st.theta.len() {
            let cur = st.theta[j];
            let BummerChain {
                alpha,
                alpha_sum,
                adapt,
                scratch,
                ..
            } = st;
            // the target is the prior plus the change in log-likelihood
            // relative to the current value, so only column j is touched
            let target = |th: &[f64]| {
                let mut delta = 0.0;
                for i in 0..n {
                    let yi = self.y.row(i);
                    let old = alpha[(i, j)];
                    let new = Self::log_alpha(th, self.z[i]).exp();
                    scratch[i] = new;
                    let a_old = alpha_sum[i];
                    let a_new = a_old - old + new;
                    let m = self.y.row_total(i);
                    delta += ln_rising(new, yi[j]) - ln_rising(old, yi[j]) - ln_rising(a_new, m)
                        + ln_rising(a_old, m);
                }
                let lp = self.priors.log_density(th) + delta;
                if lp.is_finite() {
                    lp
                } else {
                    f64::NEG_INFINITY
                }
            };
            let out = arwm_step(
                &cur,
                self.priors.log_density(&cur),
                target,
                &mut adapt[j],
                Transform::Identity,
                iteration,
                cfg.adapt_until,
                rng,
            );
            if out.accepted {
                st.theta[j] = [out.value[0], out.value[1], out.value[2]];
                for i in 0..n {
                    st.alpha_sum[i] += st.scratch[i] - st.alpha[(i, j)];
                    st.alpha[(i, j)] = st.scratch[i];
                }
            }
        }
        if iteration % 100 == 0 {
            // refresh the running sums against accumulated rounding
            for i in 0..n {
                st.alpha_sum[i] = st.alpha.row(i).sum();
            }
        }
        Ok(())
    }

    fn snapshot(&self, st: &BummerChain) -> BummerParams {
        self.to_params(&st.theta)
    }
}

/// Posterior draws (original covariate scale) and diagnostics.
#[derive(Debug, Clone)]
pub struct BummerFit {
    pub samples: PosteriorSamples<BummerParams>,
    /// Per chain, per species acceptance rate.
    pub acceptance: Vec<Vec<f64>>,
    pub rhat: Vec<(String, f64)>,
    /// `N(x̄, 1.5·s²)` prior for reconstruction, from the training covariates.
    pub xprior: XPrior,
}

impl BummerFit {
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat.iter().map(|r| r.1).reduce(f64::max)
    }

    pub fn posterior_mean(&self) -> BummerParams {
        let k = self.samples.n_pooled() as f64;
        let d = self.samples.pooled().next().map_or(0, |p| p.n_species());
        let mut m = BummerParams {
            a: vec![0.0; d],
            b: vec![0.0; d],
            c2: vec![0.0; d],
        };
        for p in self.samples.pooled() {
            for j in 0..d {
                m.a[j] += p.a[j] / k;
                m.b[j] += p.b[j] / k;
                m.c2[j] += p.c2[j] / k;
            }
        }
        m
    }
}

/// Samples the kernel parameters given training counts and covariates.
pub fn bummer_fit(
    counts: &CompositionMatrix,
    x: &[f64],
    cfg: &ChainConfig,
    priors: BummerPriors,
) -> Result<BummerFit> {
    if counts.n_rows() != x.len() || x.len() < 3 {
        return Err(Error::invalid_arg(
            "need at least three training rows with covariates",
        ));
    }
    let (x_mean, x_sd) = mean_sd(x);
    if !(x_sd > 0.0) {
        return Err(Error::invalid_data("training covariates are all equal"));
    }
    let kernel = BummerKernel {
        y: counts,
        z: x.iter().map(|v| (v - x_mean) / x_sd).collect(),
        x_mean,
        x_sd,
        priors,
    };
    let (samples, states) = run_chains_with_states(&kernel, cfg)?;
    let rhat = if cfg.chains >= 2 && cfg.retained() >= 10 {
        gelman_rubin_all(&samples, |_| true)?
    } else {
        Vec::new()
    };
    Ok(BummerFit {
        acceptance: states
            .iter()
            .map(|s| s.adapt.iter().map(AdaptState::acceptance_rate).collect())
            .collect(),
        samples,
        rhat,
        xprior: XPrior::new(x_mean, 1.5 * x_sd * x_sd)?,
    })
}

const PREDICT_WARMUP: usize = 20;
const PREDICT_STEPS: usize = 2;

/// Predictive draws of the covariate for one composition: an elliptical
/// slice chain on `x̃` under `xprior`, advanced a few steps per posterior
/// draw of the kernel parameters (parameters are not updated by `y_new`).
pub fn bummer_predict<R: Rng + ?Sized>(
    fit: &BummerFit,
    y_new: &[u32],
    xprior: &XPrior,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let draws: Vec<&BummerParams> = fit.samples.pooled().collect();
    let d = draws.first().map_or(0, |p| p.n_species());
    if y_new.len() != d {
        return Err(Error::invalid_arg(format!(
            "composition has {} species, expected {d}",
            y_new.len()
        )));
    }
    if y_new.iter().all(|&v| v == 0) {
        return Err(Error::invalid_arg("composition has zero total count"));
    }
    let upper = DMatrix::from_element(1, 1, xprior.sd());
    let mean = DVector::from_element(1, xprior.mean);
    let mut alpha = vec![0.0; d];
    let mut ll = |p: &BummerParams, x: f64| {
        for (j, a) in alpha.iter_mut().enumerate() {
            *a = p.log_alpha_j(j, x).exp();
        }
        dm_kernel(y_new, &alpha)
    };
    let mut x = DVector::from_element(1, xprior.mean);
    let mut out = Vec::with_capacity(draws.len());
    for (s, p) in draws.iter().enumerate() {
        let steps = if s == 0 {
            PREDICT_WARMUP
        } else {
            PREDICT_STEPS
        };
        let mut cur_ll = ll(p, x[0]);
        for _ in 0..steps {
            let o = ess_step_centered(&x, cur_ll, &mean, &upper, |v| ll(p, v[0]), rng)?;
            x = o.value;
            cur_ll = o.loglik;
        }
        out.push(x[0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validate() {
        assert!(BummerParams::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(BummerParams::new(vec![1.0, 2.0], vec![0.0], vec![1.0]).is_err());
        let p = BummerParams::new(vec![1.0], vec![0.5], vec![2.0]).unwrap();
        assert!((p.log_alpha(0.5)[0] - 1.0).abs() < 1e-15);
        assert!((p.log_alpha(2.5)[0] - (1.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn flat_names() {
        let p = BummerParams::new(vec![1.0, 2.0], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let names: Vec<String> = p.flat().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["a[0]", "a[1]", "b[0]", "b[1]", "c2[0]", "c2[1]"]);
    }
}
