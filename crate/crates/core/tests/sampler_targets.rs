//! ESS and ARWM on targets with known moments. Tolerances are in units of a
//! batch-means Monte Carlo standard error, so they track autocorrelation.

use mvgp_core::sampler::{
    arwm_step, ess_step, ess_step_with, run_chains, AdaptState, ChainConfig, ChainKernel, Transform,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean and its batch-means standard error.
fn mean_se(x: &[f64]) -> (f64, f64) {
    let b = 50;
    let len = x.len() / b;
    let means: Vec<f64> = (0..b)
        .map(|i| x[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let v = means.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (m, (v / b as f64).sqrt())
}

fn assert_moment(x: &[f64], truth: f64, what: &str) {
    let (m, se) = mean_se(x);
    assert!((m - truth).abs() < 3.0 * se + 1e-12, "{what}: {m} vs {truth} (se {se})");
}

fn gaussian_ll(mean: f64, sd: f64) -> impl Fn(f64) -> f64 {
    move |t| -0.5 * ((t - mean) / sd).powi(2)
}

#[test]
fn ess_conjugate_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = DMatrix::identity(1, 1);
    let ll = gaussian_ll(1.0, 1.0);
    let mut x = DVector::from_element(1, 3.0);
    let mut draws = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        x = ess_step(&x, &u, |v| ll(v[0]), &mut rng).unwrap().value;
        draws.push(x[0]);
    }
    assert_moment(&draws, 0.5, "mean");
    let sq: Vec<f64> = draws.iter().map(|v| (v - 0.5).powi(2)).collect();
    assert_moment(&sq, 0.5, "variance");
}

#[test]
fn ess_correlated_gaussian_posterior() {
    // prior N(0, P), likelihood N(y | θ, I): posterior mean (P⁻¹ + I)⁻¹ y
    let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
    let upper = p.clone().cholesky().unwrap().l().transpose();
    let y = DVector::from_vec(vec![1.0, -1.0]);
    let post = (p.try_inverse().unwrap() + DMatrix::identity(2, 2)).try_inverse().unwrap();
    let m = &post * &y;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = DVector::zeros(2);
    let mut ll_cur = -0.5 * (&x - &y).norm_squared();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let out = ess_step_with(&x, ll_cur, &upper, |v| -0.5 * (v - &y).norm_squared(), &mut rng).unwrap();
        x = out.value;
        ll_cur = out.loglik;
        a.push(x[0]);
        b.push(x[1]);
    }
    assert_moment(&a, m[0], "mean 0");
    assert_moment(&b, m[1], "mean 1");
    let cross: Vec<f64> = a.iter().zip(&b).map(|(u, v)| (u - m[0]) * (v - m[1])).collect();
    assert_moment(&cross, post[(0, 1)], "covariance");
}

#[test]
fn ess_hops_between_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let u = DMatrix::from_element(1, 1, 2.0);
    let mut x = DVector::from_element(1, 2.0);
    let mut flips = 0;
    for _ in 0..100_000 {
        let next = ess_step(&x, &u, |v| -(v[0] * v[0] - 4.0).powi(2), &mut rng).unwrap().value;
        if next[0].signum() != x[0].signum() {
            flips += 1;
        }
        x = next;
    }
    assert!(flips > 100, "{flips} sign changes");
}

fn run_arwm(
    start: Vec<f64>,
    log_target: impl Fn(&[f64]) -> f64,
    transform: Transform,
    seed: u64,
    n: usize,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapt = AdaptState::new(start.len(), 0.0);
    let adapt_until = n / 5;
    let mut x = start;
    let mut lp = log_target(&x);
    let mut out = Vec::new();
    for it in 1..=n {
        let o = arwm_step(&x, lp, &log_target, &mut adapt, transform, it, adapt_until, &mut rng);
        x = o.value;
        lp = o.log_target;
        if it > adapt_until {
            out.push(x.clone());
        }
    }
    out
}

#[test]
fn arwm_gaussian_identity_scale() {
    let d = run_arwm(vec![4.0], |x| -0.5 * x[0] * x[0], Transform::Identity, 21, 200_000);
    let x: Vec<f64> = d.iter().map(|v| v[0]).collect();
    assert_moment(&x, 0.0, "mean");
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    assert_moment(&sq, 1.0, "variance");
}

#[test]
fn arwm_correlated_block() {
    // N(0, [[1, .9], [.9, 1]]) with the multivariate (learned covariance) proposal
    let prec = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]).try_inverse().unwrap();
    let target = |x: &[f64]| {
        let v = DVector::from_column_slice(x);
        -0.5 * (v.transpose() * &prec * &v)[(0, 0)]
    };
    let d = run_arwm(vec![2.0, -2.0], target, Transform::Identity, 22, 200_000);
    let prod: Vec<f64> = d.iter().map(|v| v[0] * v[1]).collect();
    assert_moment(&prod, 0.9, "covariance");
    let a: Vec<f64> = d.iter().map(|v| v[0]).collect();
    assert_moment(&a, 0.0, "mean");
}

#[test]
fn arwm_log_scale_gamma() {
    // Gamma(shape 3, rate 2): mean 1.5, variance 0.75
    let target = |x: &[f64]| 2.0 * x[0].ln() - 2.0 * x[0];
    let d = run_arwm(vec![0.2], target, Transform::Log, 23, 200_000);
    let x: Vec<f64> = d.iter().map(|v| v[0]).collect();
    assert_moment(&x, 1.5, "mean");
    let sq: Vec<f64> = x.iter().map(|v| (v - 1.5).powi(2)).collect();
    assert_moment(&sq, 0.75, "variance");
}

#[test]
fn arwm_logit_scale_beta() {
    // (x + 1)/2 ~ Beta(2, 5) on (−1, 1): mean −1 + 4/7
    let target = |x: &[f64]| (1.0 + x[0]).ln() + 4.0 * (1.0 - x[0]).ln();
    let d = run_arwm(
        vec![0.9],
        target,
        Transform::Logit {
            lower: -1.0,
            upper: 1.0,
        },
        24,
        200_000,
    );
    let x: Vec<f64> = d.iter().map(|v| v[0]).collect();
    assert_moment(&x, -1.0 + 4.0 / 7.0, "mean");
    // Var of 2B − 1 = 4 · αβ / ((α+β)²(α+β+1)) = 4 · 10 / 392
    let sq: Vec<f64> = x.iter().map(|v| (v + 1.0 - 4.0 / 7.0).powi(2)).collect();
    assert_moment(&sq, 40.0 / 392.0, "variance");
}

/// Conjugate normal toy kernel: prior N(0, 4), one observation y = 2 with
/// unit noise, so the posterior is N(1.6, 0.8).
struct Toy;

impl ChainKernel for Toy {
    type State = DVector<f64>;
    type Draw = f64;

    fn init(&self, chain: usize, _rng: &mut ChaCha8Rng) -> mvgp_core::Result<Self::State> {
        Ok(DVector::from_element(1, chain as f64 * 3.0 - 4.0))
    }

    fn sweep(
        &self,
        state: &mut Self::State,
        _iteration: usize,
        _cfg: &ChainConfig,
        rng: &mut ChaCha8Rng,
    ) -> mvgp_core::Result<()> {
        let u = DMatrix::from_element(1, 1, 2.0);
        *state = ess_step(state, &u, |v| -0.5 * (v[0] - 2.0).powi(2), rng)?.value;
        Ok(())
    }

    fn snapshot(&self, state: &Self::State) -> f64 {
        state[0]
    }
}

#[test]
fn run_chains_conjugate_toy() {
    let cfg = ChainConfig {
        iterations: 20_000,
        burn_in: 1_000,
        thin: 1,
        chains: 4,
        seed: 31,
        adapt_until: 0,
    };
    let ps = run_chains(&Toy, &cfg).unwrap();
    assert_eq!(ps.n_pooled(), 4 * 19_000);
    let pooled: Vec<f64> = ps.draws.iter().flatten().copied().collect();
    assert_moment(&pooled, 1.6, "pooled mean");
    let sq: Vec<f64> = pooled.iter().map(|v| (v - 1.6).powi(2)).collect();
    assert_moment(&sq, 0.8, "pooled variance");
}
