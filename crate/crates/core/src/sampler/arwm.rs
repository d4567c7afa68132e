use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Scale on which the random walk moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `u = ln x`, for positive quantities.
    Log,
    /// `u = logit((x − lower)/(upper − lower))`; with bounds (−1, 1) this is
    /// `2·atanh(x)`.
    Logit {
        lower: f64,
        upper: f64,
    },
}

impl Transform {
    pub fn forward(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit { lower, upper } => {
                let p = (x - lower) / (upper - lower);
                (p / (1.0 - p)).ln()
            }
        }
    }

    pub fn inverse(&self, u: f64) -> f64 {
        match *self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit { lower, upper } => {
                let p = if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                };
                lower + (upper - lower) * p
            }
        }
    }

    /// `ln |dx/du|` at `x`.
    pub fn log_jacobian(&self, x: f64) -> f64 {
        match *self {
            Transform::Identity => 0.0,
            Transform::Log => x.ln(),
            Transform::Logit { lower, upper } => {
                (x - lower).ln() + (upper - x).ln() - (upper - lower).ln()
            }
        }
    }

    /// True when `x` is strictly inside the transform's domain.
    pub fn in_domain(&self, x: f64) -> bool {
        match *self {
            Transform::Identity => x.is_finite(),
            Transform::Log => x > 0.0 && x.is_finite(),
            Transform::Logit { lower, upper } => x > lower && x < upper,
        }
    }
}

/// Proposal scale and acceptance bookkeeping for one Metropolis block.
///
/// Every `batch_size` attempts, `log_scale` moves by `±delta/√batch` toward
/// `target_rate`. Blocks of dimension > 1 also learn the empirical
/// covariance of the transformed draws and propose from it (scaled by
/// 2.38²/dim) once enough draws are collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub log_scale: f64,
    pub accept_count: u64,
    pub attempt_count: u64,
    pub target_rate: f64,
    pub batch_size: u64,
    pub delta: f64,
    dim: usize,
    batches: u64,
    batch_accepts: u64,
    batch_attempts: u64,
    mean: Vec<f64>,
    /// Running sum of squared deviations (Welford), row-major `dim × dim`.
    m2: Vec<f64>,
    n_seen: u64,
    /// Lower Cholesky factor of the learned proposal covariance.
    chol: Option<Vec<f64>>,
}

impl AdaptState {
    pub fn new(dim: usize, log_scale: f64) -> Self {
        Self {
            log_scale,
            accept_count: 0,
            attempt_count: 0,
            target_rate: if dim <= 1 { 0.44 } else { 0.234 },
            batch_size: 50,
            delta: 1.0,
            dim,
            batches: 0,
            batch_accepts: 0,
            batch_attempts: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            n_seen: 0,
            chol: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.attempt_count == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.attempt_count as f64
        }
    }

    pub fn uses_learned_covariance(&self) -> bool {
        self.chol.is_some()
    }

    fn observe(&mut self, u: &[f64]) {
        self.n_seen += 1;
        let n = self.n_seen as f64;
        let d = self.dim;
        let delta: Vec<f64> = u.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let post_i = u[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += delta[j] * post_i;
            }
        }
    }

    fn end_batch(&mut self) {
        self.batches += 1;
        let rate = self.batch_accepts as f64 / self.batch_attempts.max(1) as f64;
        let step = self.delta / (self.batches as f64).sqrt();
        self.log_scale += if rate > self.target_rate { step } else { -step };
        self.batch_accepts = 0;
        self.batch_attempts = 0;
        let d = self.dim;
        if d > 1 && self.n_seen as usize >= 20 * d {
            let n = self.n_seen as f64;
            let s = 2.38 * 2.38 / d as f64;
            let mut cov = DMatrix::from_fn(d, d, |i, j| s * self.m2[i * d + j] / (n - 1.0));
            for i in 0..d {
                cov[(i, i)] += s * 1e-8;
            }
            let cov = (&cov + cov.transpose()) * 0.5;
            if let Some(c) = nalgebra::Cholesky::new(cov) {
                if self.chol.is_none() {
                    // the 2.38²/dim rule is already a calibrated scale
                    self.log_scale = 0.0;
                }
                self.chol = Some(c.l().as_slice().to_vec());
            }
        }
    }

    fn step_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim;
        let xi: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scale = self.log_scale.exp();
        match &self.chol {
            None => xi.into_iter().map(|v| v * scale).collect(),
            Some(l) => {
                // column-major lower factor
                let lm = DMatrix::from_column_slice(d, d, l);
                let v = lm * DVector::from_vec(xi);
                v.iter().map(|a| a * scale).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArwmOutcome {
    pub value: Vec<f64>,
    pub log_target: f64,
    pub accepted: bool,
}

/// One adaptive random-walk Metropolis step on the transformed scale.
///
/// `log_target` is the log density on the original scale; the transform's
/// Jacobian is added internally. Adaptation happens only while
/// `iteration <= adapt_until`.
#[allow(clippy::too_many_arguments)]
pub fn arwm_step<R: Rng + ?Sized>(
    current: &[f64],
    current_log_target: f64,
    mut log_target: impl FnMut(&[f64]) -> f64,
    adapt: &mut AdaptState,
    transform: Transform,
    iteration: usize,
    adapt_until: usize,
    rng: &mut R,
) -> ArwmOutcome {
    let u: Vec<f64> = current.iter().map(|&x| transform.forward(x)).collect();
    let step = adapt.step_vector(rng);
    let proposal: Vec<f64> = u
        .iter()
        .zip(&step)
        .map(|(a, b)| transform.inverse(a + b))
        .collect();
    let mut accepted = false;
    let mut lp_new = f64::NEG_INFINITY;
    if proposal.iter().all(|&x| transform.in_domain(x)) {
        lp_new = log_target(&proposal);
        let jac_new: f64 = proposal.iter().map(|&x| transform.log_jacobian(x)).sum();
        let jac_old: f64 = current.iter().map(|&x| transform.log_jacobian(x)).sum();
        let log_ratio = lp_new + jac_new - current_log_target - jac_old;
        accepted = log_ratio.is_finite() && rng.random::<f64>().ln() < log_ratio
            || log_ratio == f64::INFINITY;
    }
    adapt.attempt_count += 1;
    if accepted {
        adapt.accept_count += 1;
    }
    let (value, lp) = if accepted {
        (proposal, lp_new)
    } else {
        (current.to_vec(), current_log_target)
    };
    if iteration <= adapt_until {
        adapt.batch_attempts += 1;
        if accepted {
            adapt.batch_accepts += 1;
        }
        if adapt.dim > 1 {
            let uv: Vec<f64> = value.iter().map(|&x| transform.forward(x)).collect();
            adapt.observe(&uv);
        }
        if adapt.batch_attempts >= adapt.batch_size {
            adapt.end_batch();
        }
    }
    ArwmOutcome {
        value,
        log_target: lp,
        accepted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transforms_roundtrip() {
        let ts = [
            Transform::Identity,
            Transform::Log,
            Transform::Logit {
                lower: -1.0,
                upper: 1.0,
            },
            Transform::Logit {
                lower: 0.01,
                upper: 10.0,
            },
        ];
        for t in ts {
            for x in [0.02, 0.3, 0.9, 5.0] {
                if t.in_domain(x) {
                    assert!((t.inverse(t.forward(x)) - x).abs() < 1e-12);
                    let h = 1e-6;
                    let u = t.forward(x);
                    let fd = (t.inverse(u + h) - t.inverse(u - h)) / (2.0 * h);
                    assert!((fd.ln() - t.log_jacobian(x)).abs() < 1e-6);
                }
            }
        }
        let logit = Transform::Logit {
            lower: -1.0,
            upper: 1.0,
        };
        assert!((logit.forward(0.5) - 2.0 * 0.5f64.atanh()).abs() < 1e-12);
    }

    #[test]
    fn tiny_steps_always_accept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = AdaptState::new(1, -20.0);
        let mut x = vec![0.3];
        let lt = |v: &[f64]| -0.5 * v[0] * v[0];
        let mut lp = lt(&x);
        for it in 1..=10_000 {
            let o = arwm_step(&x, lp, lt, &mut a, Transform::Identity, it, 0, &mut rng);
            x = o.value;
            lp = o.log_target;
        }
        assert!(a.acceptance_rate() > 0.999);
    }

    #[test]
    fn frozen_after_adaptation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = AdaptState::new(3, 0.0);
        let lt = |v: &[f64]| -0.5 * v.iter().map(|x| x * x).sum::<f64>();
        let mut x = vec![0.0; 3];
        let mut lp = 0.0;
        let mut frozen = None;
        for it in 1..=4000 {
            let o = arwm_step(&x, lp, lt, &mut a, Transform::Identity, it, 2000, &mut rng);
            x = o.value;
            lp = o.log_target;
            if it == 2000 {
                frozen = Some(a.clone());
            }
            if it > 2000 {
                let f = frozen.as_ref().unwrap();
                assert_eq!(a.log_scale, f.log_scale);
                assert_eq!(a.chol, f.chol);
            }
        }
    }

    #[test]
    fn acceptance_near_target_during_adaptation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = AdaptState::new(1, 3.0);
        let lt = |v: &[f64]| -0.5 * v[0] * v[0];
        let mut x = vec![0.0];
        let mut lp = 0.0;
        let n = 200_000;
        let mut late = 0u64;
        for it in 1..=n {
            let o = arwm_step(&x, lp, lt, &mut a, Transform::Identity, it, n, &mut rng);
            x = o.value;
            lp = o.log_target;
            if it > n / 2 && o.accepted {
                late += 1;
            }
        }
        let rate = late as f64 / (n / 2) as f64;
        assert!((rate - 0.44).abs() < 0.05, "rate {rate}");
    }
}
