use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run length, retention, and seeding for a set of chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub adapt_until: usize,
}

impl Default for ChainConfig {
    /// Desk scale: 4 × 5,000 iterations, 1,000 burn-in, thin 4.
    fn default() -> Self {
        Self {
            iterations: 5_000,
            burn_in: 1_000,
            thin: 4,
            chains: 4,
            seed: 1,
            adapt_until: 1_000,
        }
    }
}

impl ChainConfig {
    /// 200,000 iterations, 50,000 burn-in, thin 150, 4 chains: 4,000 draws.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            iterations: 200_000,
            burn_in: 50_000,
            thin: 150,
            chains: 4,
            seed,
            adapt_until: 50_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::invalid_arg("burn-in must be shorter than the run"));
        }
        if self.thin < 1 || self.chains < 1 {
            return Err(Error::invalid_arg("thin and chains must be at least 1"));
        }
        if self.adapt_until > self.burn_in {
            return Err(Error::invalid_arg("adaptation must stop within burn-in"));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn is_retained(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// A Markov transition that [`run_chains`] can drive.
pub trait ChainKernel: Sync {
    type State: Send;
    type Draw: Send;

    fn init(&self, chain: usize, rng: &mut ChaCha8Rng) -> Result<Self::State>;

    /// One full scan. `iteration` is 1-based.
    fn sweep(
        &self,
        state: &mut Self::State,
        iteration: usize,
        cfg: &ChainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()>;

    fn snapshot(&self, state: &Self::State) -> Self::Draw;
}

/// Named scalars of a draw, for output and diagnostics.
pub trait FlatParams {
    fn flat(&self) -> Vec<(String, f64)>;
}

impl FlatParams for crate::mvgp::MvgpState {
    fn flat(&self) -> Vec<(String, f64)> {
        crate::mvgp::MvgpState::flat(self)
    }
}

impl FlatParams for Vec<f64> {
    fn flat(&self) -> Vec<(String, f64)> {
        self.iter()
            .enumerate()
            .map(|(i, v)| (format!("theta[{i}]"), *v))
            .collect()
    }
}

/// Retained draws of every chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples<D> {
    pub draws: Vec<Vec<D>>,
    pub chain_ids: Vec<usize>,
    pub iteration_ids: Vec<Vec<usize>>,
    pub config: ChainConfig,
}

impl<D> PosteriorSamples<D> {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn pooled(&self) -> impl Iterator<Item = &D> {
        self.draws.iter().flatten()
    }

    pub fn n_pooled(&self) -> usize {
        self.draws.iter().map(Vec::len).sum()
    }

    /// Per-chain series of a derived scalar.
    pub fn series(&self, f: impl Fn(&D) -> f64) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|c| c.iter().map(&f).collect())
            .collect()
    }
}

impl<D: FlatParams> PosteriorSamples<D> {
    /// Parameter names and per-chain `draw × parameter` tables.
    pub fn tables(&self) -> (Vec<String>, Vec<Vec<Vec<f64>>>) {
        let names = self
            .pooled()
            .next()
            .map(|d| d.flat().into_iter().map(|(n, _)| n).collect())
            .unwrap_or_default();
        let tables = self
            .draws
            .iter()
            .map(|c| {
                c.iter()
                    .map(|d| d.flat().into_iter().map(|(_, v)| v).collect())
                    .collect()
            })
            .collect();
        (names, tables)
    }

    /// One chain as CSV: `iteration` then one column per scalar.
    pub fn chain_csv(&self, chain: usize) -> String {
        use std::fmt::Write as _;
        let (names, tables) = self.tables();
        let mut out = String::from("iteration");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (it, row) in self.iteration_ids[chain].iter().zip(&tables[chain]) {
            write!(out, "{it}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Runs `cfg.chains` independent chains, chain `c` seeded with `seed + c`.
/// Chains run in parallel; results do not depend on scheduling.
pub fn run_chains<K: ChainKernel>(
    kernel: &K,
    cfg: &ChainConfig,
) -> Result<PosteriorSamples<K::Draw>> {
    Ok(run_chains_with_states(kernel, cfg)?.0)
}

/// As [`run_chains`], also returning each chain's final state.
pub fn run_chains_with_states<K: ChainKernel>(
    kernel: &K,
    cfg: &ChainConfig,
) -> Result<(PosteriorSamples<K::Draw>, Vec<K::State>)> {
    cfg.validate()?;
    let results: Vec<Result<(Vec<K::Draw>, Vec<usize>, K::State)>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_one(kernel, cfg, c))
        .collect();
    let mut draws = Vec::with_capacity(cfg.chains);
    let mut iteration_ids = Vec::with_capacity(cfg.chains);
    let mut states = Vec::with_capacity(cfg.chains);
    for r in results {
        let (d, it, st) = r?;
        draws.push(d);
        iteration_ids.push(it);
        states.push(st);
    }
    Ok((
        PosteriorSamples {
            draws,
            chain_ids: (0..cfg.chains).collect(),
            iteration_ids,
            config: *cfg,
        },
        states,
    ))
}

fn run_one<K: ChainKernel>(
    kernel: &K,
    cfg: &ChainConfig,
    chain: usize,
) -> Result<(Vec<K::Draw>, Vec<usize>, K::State)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(chain as u64));
    let wrap = |iteration: usize, e: Error| match e {
        Error::ChainAbort { .. } => e,
        other => Error::ChainAbort {
            chain,
            iteration,
            message: other.to_string(),
        },
    };
    let mut state = kernel.init(chain, &mut rng).map_err(|e| wrap(0, e))?;
    let mut draws = Vec::with_capacity(cfg.retained());
    let mut ids = Vec::with_capacity(cfg.retained());
    for it in 1..=cfg.iterations {
        kernel
            .sweep(&mut state, it, cfg, &mut rng)
            .map_err(|e| wrap(it, e))?;
        if cfg.is_retained(it) {
            draws.push(kernel.snapshot(&state));
            ids.push(it);
        }
    }
    Ok((draws, ids, state))
}

/// Split-R̂ from per-chain series (each chain split in half).
pub fn gelman_rubin_series(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::invalid_arg("R-hat needs at least two chains"));
    }
    let k = chains.iter().map(Vec::len).min().unwrap_or(0);
    if k < 10 {
        return Err(Error::invalid_arg(
            "R-hat needs at least 10 draws per chain",
        ));
    }
    let n = k / 2;
    let mut seqs: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        seqs.push(&c[..n]);
        seqs.push(&c[c.len() - n..]);
    }
    let m = seqs.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Split-R̂ of one named parameter.
pub fn gelman_rubin<D: FlatParams>(ps: &PosteriorSamples<D>, param: &str) -> Result<f64> {
    let (names, tables) = ps.tables();
    let idx = names
        .iter()
        .position(|n| n == param)
        .ok_or_else(|| Error::invalid_arg(format!("unknown parameter {param}")))?;
    let series: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| t.iter().map(|r| r[idx]).collect())
        .collect();
    gelman_rubin_series(&series)
}

/// Split-R̂ of every parameter whose name passes `keep`.
pub fn gelman_rubin_all<D: FlatParams>(
    ps: &PosteriorSamples<D>,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<(String, f64)>> {
    let (names, tables) = ps.tables();
    let mut out = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        if !keep(name) {
            continue;
        }
        let series: Vec<Vec<f64>> = tables
            .iter()
            .map(|t| t.iter().map(|r| r[idx]).collect())
            .collect();
        out.push((name.clone(), gelman_rubin_series(&series)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    struct Iid;

    impl ChainKernel for Iid {
        type State = f64;
        type Draw = Vec<f64>;

        fn init(&self, _chain: usize, _rng: &mut ChaCha8Rng) -> Result<f64> {
            Ok(0.0)
        }

        fn sweep(
            &self,
            s: &mut f64,
            _it: usize,
            _cfg: &ChainConfig,
            rng: &mut ChaCha8Rng,
        ) -> Result<()> {
            *s = rng.sample(StandardNormal);
            Ok(())
        }

        fn snapshot(&self, s: &f64) -> Vec<f64> {
            vec![*s]
        }
    }

    #[test]
    fn retention_arithmetic() {
        let cfg = ChainConfig {
            iterations: 100,
            burn_in: 50,
            thin: 10,
            chains: 1,
            seed: 3,
            adapt_until: 0,
        };
        let ps = run_chains(&Iid, &cfg).unwrap();
        assert_eq!(ps.draws[0].len(), 5);
        assert_eq!(ps.iteration_ids[0], vec![60, 70, 80, 90, 100]);
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = ChainConfig {
            iterations: 200,
            burn_in: 100,
            thin: 1,
            chains: 3,
            seed: 9,
            adapt_until: 0,
        };
        assert_eq!(
            run_chains(&Iid, &cfg).unwrap(),
            run_chains(&Iid, &cfg).unwrap()
        );
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ChainConfig::default();
        cfg.burn_in = cfg.iterations;
        assert!(cfg.validate().is_err());
        let mut cfg = ChainConfig::default();
        cfg.adapt_until = cfg.burn_in + 1;
        assert!(cfg.validate().is_err());
        assert_eq!(ChainConfig::full_scale(1).retained() * 4, 4000);
    }

    #[test]
    fn rhat_iid_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let r = gelman_rubin_series(&[a.clone(), b.clone()]).unwrap();
        assert!((0.999..=1.01).contains(&r), "{r}");
        let shifted: Vec<f64> = b.iter().map(|x| x + 10.0).collect();
        assert!(gelman_rubin_series(&[a.clone(), shifted]).unwrap() > 1.5);
        assert!(gelman_rubin_series(&[a]).is_err());
    }
}
