use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `ln Γ(a + n) − ln Γ(a)`: a short product for small `n`, log-gamma
/// otherwise. Products are chunked so they cannot overflow.
#[inline]
pub(crate) fn ln_rising(a: f64, n: u32) -> f64 {
    match n {
        0 => 0.0,
        1 => a.ln(),
        2..=12 => {
            let mut p = a;
            for k in 1..n {
                p *= a + k as f64;
            }
            if p.is_finite() && p > 0.0 {
                p.ln()
            } else {
                ln_gamma(a + n as f64) - ln_gamma(a)
            }
        }
        _ => ln_gamma(a + n as f64) - ln_gamma(a),
    }
}

/// Normalized Dirichlet-multinomial log probability:
/// `ln M! − Σ ln y_j! + ln Γ(Σα) − ln Γ(M+Σα) + Σ_j [ln Γ(y_j+α_j) − ln Γ(α_j)]`.
pub fn dm_log_pmf(y: &[u32], alpha: &[f64]) -> Result<f64> {
    check(y, alpha)?;
    Ok(dm_kernel(y, alpha) + log_multinomial_coef(y))
}

/// The α-dependent part of [`dm_log_pmf`] (no multinomial coefficient);
/// this is what the samplers evaluate.
pub fn dm_log_kernel(y: &[u32], alpha: &[f64]) -> Result<f64> {
    check(y, alpha)?;
    Ok(dm_kernel(y, alpha))
}

pub fn log_multinomial_coef(y: &[u32]) -> f64 {
    let m: u32 = y.iter().sum();
    ln_gamma(m as f64 + 1.0) - y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).sum::<f64>()
}

fn check(y: &[u32], alpha: &[f64]) -> Result<()> {
    if y.len() != alpha.len() || y.is_empty() {
        return Err(Error::invalid_arg(format!(
            "count vector has {} entries but alpha has {}",
            y.len(),
            alpha.len()
        )));
    }
    if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::invalid_arg("alpha must be finite and positive"));
    }
    if y.iter().all(|&v| v == 0) {
        return Err(Error::invalid_arg("composition has zero total count"));
    }
    Ok(())
}

#[inline]
pub(crate) fn dm_kernel(y: &[u32], alpha: &[f64]) -> f64 {
    let mut m = 0u32;
    let mut a_sum = 0.0;
    let mut acc = 0.0;
    for (&yj, &aj) in y.iter().zip(alpha) {
        m += yj;
        a_sum += aj;
        acc += ln_rising(aj, yj);
    }
    acc - ln_rising(a_sum, m)
}

/// Gradient of [`dm_log_kernel`] with respect to `ln α`.
pub fn dm_grad_log_alpha(y: &[u32], alpha: &[f64]) -> Vec<f64> {
    use statrs::function::gamma::digamma;
    let m: u32 = y.iter().sum();
    let a_sum: f64 = alpha.iter().sum();
    let common = digamma(a_sum) - digamma(a_sum + m as f64);
    y.iter()
        .zip(alpha)
        .map(|(&yj, &aj)| aj * (common + digamma(aj + yj as f64) - digamma(aj)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_category_is_certain() {
        assert!(dm_log_pmf(&[7], &[0.3]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_two_categories() {
        let v = dm_log_pmf(&[1, 0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_limit_is_multinomial() {
        let y = [2, 3];
        let a = [0.3e6, 0.7e6];
        let dm = dm_log_pmf(&y, &a).unwrap();
        let mult = log_multinomial_coef(&y) + 2.0 * 0.3f64.ln() + 3.0 * 0.7f64.ln();
        assert!((dm - mult).abs() < 1e-3);
    }

    #[test]
    fn ln_rising_paths_agree() {
        for &a in &[1e-13, 0.01, 0.7, 3.0, 50.0, 1e6] {
            for n in 0..40u32 {
                let direct = ln_gamma(a + n as f64) - ln_gamma(a);
                let fast = ln_rising(a, n);
                assert!(
                    (direct - fast).abs() < 1e-9 * (1.0 + direct.abs()),
                    "a={a} n={n}"
                );
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(dm_log_pmf(&[1, 2], &[1.0]).is_err());
        assert!(dm_log_pmf(&[1, 2], &[1.0, f64::NAN]).is_err());
        assert!(dm_log_pmf(&[1, 2], &[1.0, 0.0]).is_err());
        assert!(dm_log_pmf(&[0, 0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let y = [3, 0, 9, 1];
        let la = [0.2, -1.0, 1.5, 0.0];
        let alpha: Vec<f64> = la.iter().map(|v: &f64| v.exp()).collect();
        let g = dm_grad_log_alpha(&y, &alpha);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = la;
            let mut m = la;
            p[k] += h;
            m[k] -= h;
            let fp = dm_kernel(&y, &p.map(f64::exp));
            let fm = dm_kernel(&y, &m.map(f64::exp));
            assert!(((fp - fm) / (2.0 * h) - g[k]).abs() < 1e-6);
        }
    }
}
