//! Separation-strategy prior on an inter-species covariance `Σ = Rᵀ R`.
//!
//! `R = R_Ω diag(τ)`, where the upper Cholesky factor `R_Ω` of the correlation
//! matrix is built from partial correlations `φ` arranged column by column
//! in the strict upper triangle, and each standard deviation `τ_j` is
//! half-Cauchy(0, s_j) through the gamma mixture
//! `τ_j² | λ_j ~ Gamma(1/2, rate λ_j)`, `λ_j ~ Gamma(1/2, rate s_j²)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Number of partial correlations for `d` species.
pub fn n_partials(d: usize) -> usize {
    d * (d.saturating_sub(1)) / 2
}

/// Species count implied by `b` partial correlations.
pub fn species_from_partials(b: usize) -> Option<usize> {
    (1..=4096).find(|&d| n_partials(d) == b)
}

/// Position of `(i, j)`, `i < j`, in the column-wise upper-triangle layout.
pub fn partial_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    j * (j - 1) / 2 + i
}

/// Partial correlations and their symmetric beta shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VineAngles {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// How the beta shapes `ψ_b` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PsiSchedule {
    /// `ψ = η + (d − 1 − i)/2` for a partial correlation in row `i`
    /// (1-based); `η = 1` gives a uniform prior over correlation matrices.
    Lkj {
        eta: f64,
    },
    Constant {
        psi: f64,
    },
}

impl Default for PsiSchedule {
    fn default() -> Self {
        PsiSchedule::Lkj { eta: 1.0 }
    }
}

impl PsiSchedule {
    pub fn shapes(&self, d: usize) -> Vec<f64> {
        let mut psi = vec![0.0; n_partials(d)];
        for j in 1..d {
            for i in 0..j {
                psi[partial_index(i, j)] = match *self {
                    PsiSchedule::Lkj { eta } => eta + (d as f64 - 2.0 - i as f64) / 2.0,
                    PsiSchedule::Constant { psi } => psi,
                };
            }
        }
        psi
    }
}

impl VineAngles {
    pub fn new(phi: Vec<f64>, psi: Vec<f64>) -> Result<Self> {
        if phi.len() != psi.len() || species_from_partials(phi.len()).is_none() {
            return Err(Error::invalid_arg(format!(
                "{} partial correlations / {} shapes do not describe a d×d matrix",
                phi.len(),
                psi.len()
            )));
        }
        if phi.iter().any(|p| !(p.abs() < 1.0)) {
            return Err(Error::invalid_arg(
                "partial correlations must lie in (-1, 1)",
            ));
        }
        if psi.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid_arg("beta shapes must be positive"));
        }
        Ok(Self { phi, psi })
    }

    /// All-zero partial correlations (identity correlation).
    pub fn zeros(d: usize, schedule: PsiSchedule) -> Self {
        Self {
            phi: vec![0.0; n_partials(d)],
            psi: schedule.shapes(d),
        }
    }

    pub fn dim(&self) -> usize {
        species_from_partials(self.phi.len()).unwrap_or(1)
    }

    /// Independent prior draw.
    pub fn sample_prior<R: Rng + ?Sized>(d: usize, schedule: PsiSchedule, rng: &mut R) -> Self {
        let psi = schedule.shapes(d);
        let phi = psi
            .iter()
            .map(|&s| {
                let b = Beta::new(s, s).expect("positive shapes");
                (2.0 * b.sample(rng) - 1.0).clamp(-1.0 + 1e-15, 1.0 - 1e-15)
            })
            .collect();
        Self { phi, psi }
    }
}

/// Upper-triangular `R_Ω` with unit-norm columns from the vine recursion.
pub fn vine_to_cholesky(v: &VineAngles) -> DMatrix<f64> {
    cholesky_from_partials(&v.phi, v.dim())
}

pub(crate) fn cholesky_from_partials(phi: &[f64], d: usize) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(d, d);
    for j in 0..d {
        // running product of sqrt(1 − Φ²) down column j
        let mut tail = 1.0;
        for i in 0..j {
            let p = phi[partial_index(i, j)];
            r[(i, j)] = p * tail;
            tail *= (1.0 - p * p).sqrt();
        }
        r[(j, j)] = tail;
    }
    r
}

/// Scaled-beta log density of the partial correlations, including the 1/2
/// Jacobian of `u ↦ 2u − 1`.
pub fn log_prior_phi(v: &VineAngles) -> f64 {
    v.phi
        .iter()
        .zip(&v.psi)
        .map(|(&p, &s)| {
            if !(p.abs() < 1.0) {
                return f64::NEG_INFINITY;
            }
            let u = 0.5 * (p + 1.0);
            (s - 1.0) * (u.ln() + (1.0 - u).ln()) - ln_beta(s, s) - std::f64::consts::LN_2
        })
        .sum()
}

/// Variances, mixing rates, and half-Cauchy scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMixture {
    pub tau2: Vec<f64>,
    pub lambda: Vec<f64>,
    pub s: Vec<f64>,
}

impl ScaleMixture {
    pub fn new(tau2: Vec<f64>, lambda: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if tau2.len() != lambda.len() || tau2.len() != s.len() {
            return Err(Error::invalid_arg("scale mixture vectors differ in length"));
        }
        let bad = |v: &[f64]| v.iter().any(|&x| !(x > 0.0 && x.is_finite()));
        if bad(&tau2) || bad(&lambda) || bad(&s) {
            return Err(Error::invalid_arg("scale mixture entries must be positive"));
        }
        Ok(Self { tau2, lambda, s })
    }

    /// `τ² = 1` with each `λ` at its conditional mean.
    pub fn unit(d: usize, s: f64) -> Self {
        Self {
            tau2: vec![1.0; d],
            lambda: vec![1.0 / (s * s + 1.0); d],
            s: vec![s; d],
        }
    }

    pub fn tau(&self) -> Vec<f64> {
        self.tau2.iter().map(|t| t.sqrt()).collect()
    }

    /// `Σ_j log Gamma(τ_j²; 1/2, rate λ_j)`.
    pub fn log_prior_tau2(&self) -> f64 {
        self.tau2
            .iter()
            .zip(&self.lambda)
            .map(|(&t, &l)| log_gamma_rate(t, 0.5, l))
            .sum()
    }

    /// `Σ_j log Gamma(λ_j; 1/2, rate s_j²)`.
    pub fn log_prior_lambda(&self) -> f64 {
        self.lambda
            .iter()
            .zip(&self.s)
            .map(|(&l, &s)| log_gamma_rate(l, 0.5, s * s))
            .sum()
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior_tau2() + self.log_prior_lambda()
    }
}

/// Gamma log density in the shape/rate parameterization.
pub fn log_gamma_rate(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
        .max(f64::MIN_POSITIVE)
}

/// Exact conditional update `λ_j | τ_j² ~ Gamma(1, rate s_j² + τ_j²)`.
pub fn sample_lambda_given_tau2<R: Rng + ?Sized>(sm: &ScaleMixture, rng: &mut R) -> Vec<f64> {
    sm.tau2
        .iter()
        .zip(&sm.s)
        .map(|(&t, &s)| gamma_rate(1.0, s * s + t, rng))
        .collect()
}

/// Exact conditional draw `τ_j² | λ_j ~ Gamma(1/2, rate λ_j)`, valid when no
/// likelihood term involves `τ`.
pub fn sample_tau2_given_lambda<R: Rng + ?Sized>(sm: &ScaleMixture, rng: &mut R) -> Vec<f64> {
    sm.lambda.iter().map(|&l| gamma_rate(0.5, l, rng)).collect()
}

/// Cholesky factors of the correlation and covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CovFactor {
    pub r_omega: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CovFactor {
    pub fn covariance(&self) -> DMatrix<f64> {
        self.r.transpose() * &self.r
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        self.r_omega.transpose() * &self.r_omega
    }
}

/// `R = R_Ω diag(τ)`.
pub fn assemble_r(r_omega: &DMatrix<f64>, sm: &ScaleMixture) -> CovFactor {
    let tau = sm.tau();
    let mut r = r_omega.clone();
    for (j, t) in tau.iter().enumerate() {
        r.column_mut(j).scale_mut(*t);
    }
    CovFactor {
        r_omega: r_omega.clone(),
        r,
    }
}

pub fn cov_factor(v: &VineAngles, sm: &ScaleMixture) -> CovFactor {
    assemble_r(&vine_to_cholesky(v), sm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Partial correlations of a correlation matrix by the classical
    /// recursion `ρ_{ij|1..k}`, independent of any Cholesky factor.
    fn partials_from_correlation(omega: &DMatrix<f64>) -> Vec<f64> {
        let d = omega.nrows();
        let mut cur = omega.clone();
        let mut phi = vec![0.0; n_partials(d)];
        for k in 0..d {
            for j in k + 1..d {
                phi[partial_index(k, j)] = cur[(k, j)];
            }
            let mut next = cur.clone();
            for i in k + 1..d {
                for j in k + 1..d {
                    if i == j {
                        continue;
                    }
                    let num = cur[(i, j)] - cur[(i, k)] * cur[(j, k)];
                    let den = ((1.0 - cur[(i, k)].powi(2)) * (1.0 - cur[(j, k)].powi(2))).sqrt();
                    next[(i, j)] = num / den;
                }
            }
            cur = next;
        }
        phi
    }

    #[test]
    fn zero_partials_give_identity() {
        let v = VineAngles::zeros(2, PsiSchedule::default());
        assert_eq!(vine_to_cholesky(&v), DMatrix::identity(2, 2));
    }

    #[test]
    fn two_by_two_by_hand() {
        let v = VineAngles::new(vec![0.5], vec![1.0]).unwrap();
        let r = vine_to_cholesky(&v);
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((r[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((r[(1, 1)] - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(r[(1, 0)], 0.0);
        let omega = r.transpose() * &r;
        assert!((omega[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_draws_are_correlation_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let v = VineAngles::sample_prior(3, PsiSchedule::default(), &mut rng);
            let r = vine_to_cholesky(&v);
            let omega = r.transpose() * &r;
            for i in 0..3 {
                assert!((omega[(i, i)] - 1.0).abs() < 1e-10);
                for j in 0..3 {
                    assert!(omega[(i, j)].abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn partial_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 2..=6 {
            for _ in 0..50 {
                let v = VineAngles::sample_prior(d, PsiSchedule::default(), &mut rng);
                let r = vine_to_cholesky(&v);
                let omega = r.transpose() * &r;
                let back = partials_from_correlation(&omega);
                let r2 = cholesky_from_partials(&back, d);
                assert!((r2 - &r).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn uniform_shapes_give_flat_density() {
        let a = VineAngles::new(vec![0.1, -0.7, 0.3], vec![1.0; 3]).unwrap();
        let b = VineAngles::new(vec![0.9, 0.0, -0.2], vec![1.0; 3]).unwrap();
        assert!((log_prior_phi(&a) - log_prior_phi(&b)).abs() < 1e-14);
        let edge = VineAngles::new(vec![1.0 - 1e-300], vec![2.0]);
        assert!(edge.is_err() || log_prior_phi(&edge.unwrap()) < -50.0);
        let near = VineAngles::new(vec![1.0 - 1e-12], vec![2.0]).unwrap();
        let mid = VineAngles::new(vec![0.0], vec![2.0]).unwrap();
        assert!(log_prior_phi(&near) < log_prior_phi(&mid) - 20.0);
    }

    #[test]
    fn lkj_schedule_rows() {
        // d = 4: row 1 → 2.0, row 2 → 1.5, row 3 → 1.0
        let psi = PsiSchedule::default().shapes(4);
        assert_eq!(psi[partial_index(0, 1)], 2.0);
        assert_eq!(psi[partial_index(0, 3)], 2.0);
        assert_eq!(psi[partial_index(1, 2)], 1.5);
        assert_eq!(psi[partial_index(2, 3)], 1.0);
    }

    #[test]
    fn lambda_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sm = ScaleMixture::new(vec![0.7], vec![1.0], vec![1.3]).unwrap();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_lambda_given_tau2(&sm, &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let rate = 1.3f64.powi(2) + 0.7;
        // Gamma(1, rate) has sd 1/rate
        let se = (1.0 / rate) / (n as f64).sqrt();
        assert!((mean - 1.0 / rate).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn assembled_factor_scales_columns() {
        let v = VineAngles::new(vec![0.0], vec![1.0]).unwrap();
        let sm = ScaleMixture::new(vec![4.0, 9.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let cf = cov_factor(&v, &sm);
        let sigma = cf.covariance();
        assert!(
            (sigma - DMatrix::from_diagonal(&nalgebra::dvector![4.0, 9.0]))
                .abs()
                .max()
                < 1e-12
        );
        let unit = ScaleMixture::unit(2, 1.0);
        assert_eq!(cov_factor(&v, &unit).r, vine_to_cholesky(&v));
    }

    #[test]
    fn covariance_diagonal_is_tau2() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let v = VineAngles::sample_prior(5, PsiSchedule::default(), &mut rng);
            let tau2: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..5.0)).collect();
            let sm = ScaleMixture::new(tau2.clone(), vec![1.0; 5], vec![1.0; 5]).unwrap();
            let cf = cov_factor(&v, &sm);
            let sigma = cf.covariance();
            for j in 0..5 {
                assert!((sigma[(j, j)] - tau2[j]).abs() < 1e-10);
            }
            assert!(min_eigenvalue(&sigma) >= -1e-10);
        }
    }
}
