use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelFamily {
    Exponential,
    Matern { nu: f64 },
}

/// Isotropic correlation function with length-scale `rho`.
///
/// The Matérn member is normalized to 1 at distance zero and parameterized so
/// that `nu = 0.5` coincides with the exponential kernel `exp(-δ/ρ)`:
/// `c(δ) = 2^(1-ν)/Γ(ν) · u^ν · K_ν(u)` with `u = δ/ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub family: KernelFamily,
    pub rho: f64,
}

impl CorrelationKernel {
    pub fn exponential(rho: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, rho)
    }

    pub fn matern(nu: f64, rho: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern { nu }, rho)
    }

    pub fn new(family: KernelFamily, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "length-scale {rho} must be positive"
            )));
        }
        if let KernelFamily::Matern { nu } = family {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::invalid_arg(format!(
                    "smoothness {nu} must be positive"
                )));
            }
        }
        Ok(Self { family, rho })
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.family, rho)
    }

    /// Correlation at Euclidean distance `delta`.
    pub fn at_distance(&self, delta: f64) -> f64 {
        let u = delta.abs() / self.rho;
        match self.family {
            KernelFamily::Exponential => (-u).exp(),
            KernelFamily::Matern { nu } => matern(nu, u),
        }
    }

    /// Derivative of the correlation with respect to the signed offset
    /// `delta = x − x'`.
    pub fn derivative(&self, delta: f64) -> f64 {
        let u = delta.abs() / self.rho;
        let sign = delta.signum();
        let e = (-u).exp();
        match self.family {
            KernelFamily::Exponential => -sign * e / self.rho,
            KernelFamily::Matern { nu } if nu == 0.5 => -sign * e / self.rho,
            KernelFamily::Matern { nu } if nu == 1.5 => -sign * u * e / self.rho,
            KernelFamily::Matern { nu } if nu == 2.5 => {
                -sign * u * (1.0 + u) * e / (3.0 * self.rho)
            }
            KernelFamily::Matern { .. } => {
                let h = 1e-6 * self.rho;
                (self.at_distance(delta + h) - self.at_distance(delta - h)) / (2.0 * h)
            }
        }
    }
}

pub fn correlation(x: f64, x2: f64, k: &CorrelationKernel) -> f64 {
    k.at_distance(x - x2)
}

fn matern(nu: f64, u: f64) -> f64 {
    if u == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        (-u).exp()
    } else if nu == 1.5 {
        (1.0 + u) * (-u).exp()
    } else if nu == 2.5 {
        (1.0 + u + u * u / 3.0) * (-u).exp()
    } else {
        matern_general(nu, u)
    }
}

pub(crate) fn matern_general(nu: f64, u: f64) -> f64 {
    if u == 0.0 {
        return 1.0;
    }
    // log of 2^(1-ν)/Γ(ν) u^ν, then times e^{-u}·K̃_ν(u)
    let log_pre = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * u.ln() - u;
    let k = bessel_k_scaled(nu, u);
    if k == 0.0 {
        return 0.0;
    }
    (log_pre + k.ln()).exp().min(1.0)
}

/// Exponentially scaled modified Bessel function of the second kind,
/// `e^x K_ν(x)`, from `K_ν(x) = ∫₀^∞ exp(-x cosh t) cosh(νt) dt`.
///
/// The integrand is analytic and even in `t`, so the trapezoid rule converges
/// geometrically in the step size.
pub(crate) fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let h = 0.02;
    let f = |t: f64| (-x * (t.cosh() - 1.0) + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
    let mut sum = 0.5 * f(0.0);
    let mut t = h;
    loop {
        let v = f(t);
        sum += v;
        if v < 1e-17 * sum || t > 700.0 {
            break;
        }
        t += h;
    }
    sum * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_values() {
        let k = CorrelationKernel::exponential(1.0).unwrap();
        assert_eq!(correlation(0.3, 0.3, &k), 1.0);
        assert!((correlation(0.0, 1.0, &k) - 0.367_879_441_171_442_3).abs() < 1e-12);
    }

    #[test]
    fn matern_half_is_exponential() {
        let m = CorrelationKernel::matern(0.5, 2.0).unwrap();
        let e = CorrelationKernel::exponential(2.0).unwrap();
        assert!((m.at_distance(3.0) - 0.223_130_160_148_429_8).abs() < 1e-10);
        for d in [0.0, 0.01, 0.5, 3.0, 10.0] {
            assert!((m.at_distance(d) - e.at_distance(d)).abs() < 1e-10);
            assert!((matern_general(0.5, d / 2.0) - e.at_distance(d)).abs() < 1e-10);
        }
    }

    #[test]
    fn general_path_matches_closed_forms() {
        for u in [1e-4, 0.1, 0.7, 2.0, 6.0, 25.0] {
            assert!(
                (matern_general(1.5, u) - matern(1.5, u)).abs() < 1e-10,
                "u={u}"
            );
            assert!(
                (matern_general(2.5, u) - matern(2.5, u)).abs() < 1e-10,
                "u={u}"
            );
        }
    }

    #[test]
    fn bessel_k_known_values() {
        // K_0(1) and K_1(2) from standard tables
        assert!(
            (bessel_k_scaled(0.0, 1.0) * (-1f64).exp() - 0.421_024_438_240_708_3).abs() < 1e-12
        );
        assert!(
            (bessel_k_scaled(1.0, 2.0) * (-2f64).exp() - 0.139_865_881_816_522_4).abs() < 1e-12
        );
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for k in [
            CorrelationKernel::exponential(0.7).unwrap(),
            CorrelationKernel::matern(1.5, 0.7).unwrap(),
            CorrelationKernel::matern(2.5, 1.3).unwrap(),
        ] {
            for d in [-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (k.at_distance(d + h) - k.at_distance(d - h)) / (2.0 * h);
                assert!((fd - k.derivative(d)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(CorrelationKernel::exponential(0.0).is_err());
        assert!(CorrelationKernel::matern(-1.0, 1.0).is_err());
    }

    #[test]
    fn decreasing_in_distance() {
        for k in [
            CorrelationKernel::exponential(0.7).unwrap(),
            CorrelationKernel::matern(1.5, 0.7).unwrap(),
            CorrelationKernel::matern(0.8, 0.7).unwrap(),
        ] {
            let mut prev = 1.0;
            for i in 1..200 {
                let c = k.at_distance(i as f64 * 0.05);
                assert!(c < prev && c > 0.0);
                prev = c;
            }
        }
    }
}
