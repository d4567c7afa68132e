use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Result of one elliptical slice transition.
#[derive(Debug, Clone)]
pub struct EssOutcome {
    pub value: DVector<f64>,
    pub loglik: f64,
    /// Likelihood evaluations spent (at least one unless the bracket
    /// collapsed immediately).
    pub evaluations: usize,
    /// False only if the bracket shrank to nothing; `value` is then the
    /// starting point and was not the last point evaluated.
    pub moved: bool,
}

/// Elliptical slice sampling step for a `N(0, Uᵀ U)` prior, given the upper
/// factor `U` and the log-likelihood at the current point.
pub fn ess_step_with<R: Rng + ?Sized>(
    current: &DVector<f64>,
    current_loglik: f64,
    prior_upper: &DMatrix<f64>,
    mut loglik: impl FnMut(&DVector<f64>) -> f64,
    rng: &mut R,
) -> Result<EssOutcome> {
    if !current_loglik.is_finite() {
        return Err(Error::Numerical(format!(
            "log-likelihood {current_loglik} at the current point is not finite"
        )));
    }
    let n = current.len();
    let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nu = prior_upper.tr_mul(&xi);
    let log_y = current_loglik + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * 2.0 * PI;
    let (mut lo, mut hi) = (theta - 2.0 * PI, theta);
    let mut evaluations = 0;
    loop {
        let (s, c) = theta.sin_cos();
        let proposal = current * c + &nu * s;
        let ll = loglik(&proposal);
        evaluations += 1;
        if ll > log_y {
            return Ok(EssOutcome {
                value: proposal,
                loglik: ll,
                evaluations,
                moved: true,
            });
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        if hi - lo < 1e-12 {
            return Ok(EssOutcome {
                value: current.clone(),
                loglik: current_loglik,
                evaluations,
                moved: false,
            });
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
}

/// [`ess_step_with`] evaluating the current log-likelihood first.
pub fn ess_step<R: Rng + ?Sized>(
    current: &DVector<f64>,
    prior_upper: &DMatrix<f64>,
    mut loglik: impl FnMut(&DVector<f64>) -> f64,
    rng: &mut R,
) -> Result<EssOutcome> {
    let ll = loglik(current);
    ess_step_with(current, ll, prior_upper, loglik, rng)
}

/// ESS under a `N(mean, Uᵀ U)` prior: runs on the centered variable.
pub fn ess_step_centered<R: Rng + ?Sized>(
    current: &DVector<f64>,
    current_loglik: f64,
    mean: &DVector<f64>,
    prior_upper: &DMatrix<f64>,
    mut loglik: impl FnMut(&DVector<f64>) -> f64,
    rng: &mut R,
) -> Result<EssOutcome> {
    let centered = current - mean;
    let mut out = ess_step_with(
        &centered,
        current_loglik,
        prior_upper,
        |v| loglik(&(v + mean)),
        rng,
    )?;
    out.value += mean;
    if !out.moved {
        out.value = current.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_likelihood_samples_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let cov = u.transpose() * &u;
        let mut x = DVector::from_vec(vec![3.0, -3.0]);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            x = ess_step(&x, &u, |_| 0.0, &mut rng).unwrap().value;
            sum += &x;
            sq += &x * x.transpose();
        }
        let mean = sum / n as f64;
        let emp = sq / n as f64 - &mean * mean.transpose();
        for i in 0..2 {
            assert!(mean[i].abs() < 3.0 * (cov[(i, i)] / n as f64).sqrt() * 3.0);
            for j in 0..2 {
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 0.05 * cov[(i, i)].max(cov[(j, j)]));
            }
        }
    }

    #[test]
    fn nonfinite_start_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DMatrix::identity(1, 1);
        let x = DVector::from_element(1, 0.0);
        assert!(ess_step(&x, &u, |_| f64::NEG_INFINITY, &mut rng).is_err());
    }

    #[test]
    fn centered_prior_mean_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DMatrix::identity(1, 1) * 0.5;
        let mean = DVector::from_element(1, 4.0);
        let mut x = DVector::from_element(1, 4.0);
        let n = 50_000;
        let mut s = 0.0;
        for _ in 0..n {
            x = ess_step_centered(&x, 0.0, &mean, &u, |_| 0.0, &mut rng)
                .unwrap()
                .value;
            s += x[0];
        }
        assert!((s / n as f64 - 4.0).abs() < 0.02);
    }
}
