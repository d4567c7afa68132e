//! Seeded synthetic datasets: BUMMER-generated and MVGP-generated scenarios,
//! and correlated latent curves for illustration.
//!
//! The default scenarios are documented substitutes, not published settings.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::BummerParams;
use crate::dataio::{CompositionMatrix, CovariateSet};
use crate::error::{Error, Result};
use crate::kernels::{gram, make_knots, CorrelationKernel, KernelFamily, LowRankBasis};
use crate::linalg::{cholesky_lower, min_eigenvalue};

pub const SCENARIO_NOTE: &str =
    "synthetic scenario; parameter values are the documented defaults in SimConfig";

/// Total count per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CountSpec {
    Fixed {
        m: u32,
    },
    /// Uniform over `lo..=hi`.
    Range {
        lo: u32,
        hi: u32,
    },
}

/// Inter-species covariance of the latent field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SigmaSpec {
    /// `tau² · I`.
    Identity { tau: f64 },
    /// Species split into `groups` contiguous blocks: correlation `within`
    /// inside a block and `between` across blocks, standard deviation `tau`.
    Block {
        groups: usize,
        within: f64,
        between: f64,
        tau: f64,
    },
    /// Full covariance matrix, row-major.
    Explicit { matrix: Vec<Vec<f64>> },
}

impl SigmaSpec {
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            SigmaSpec::Identity { tau } => DMatrix::from_diagonal_element(d, d, tau * tau),
            SigmaSpec::Block {
                groups,
                within,
                between,
                tau,
            } => {
                if *groups == 0 {
                    return Err(Error::invalid_arg(
                        "block covariance needs at least one group",
                    ));
                }
                let size = d.div_ceil(*groups);
                DMatrix::from_fn(d, d, |i, j| {
                    let c = if i == j {
                        1.0
                    } else if i / size == j / size {
                        *within
                    } else {
                        *between
                    };
                    c * tau * tau
                })
            }
            SigmaSpec::Explicit { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid_arg(format!("covariance must be {d}×{d}")));
                }
                DMatrix::from_fn(d, d, |i, j| matrix[i][j])
            }
        };
        if (&m - m.transpose()).abs().max() > 1e-12 || min_eigenvalue(&m) <= 0.0 {
            return Err(Error::invalid_arg(
                "covariance specification is not positive definite",
            ));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GeneratorSpec {
    /// Gaussian-kernel responses. Missing `params` are drawn:
    /// `a_j ~ U(a_range)`, `b_j` evenly spaced over the covariate range,
    /// `c_j ~ U(c_range)`.
    Bummer {
        params: Option<BummerParams>,
        a_range: (f64, f64),
        c_range: (f64, f64),
    },
    /// Latent multivariate GP on the log scale. With `knots`, the field is a
    /// predictive process through that many knots placed as a fit would place
    /// them (over the training covariates, extended by `knot_extend` sd).
    Mvgp {
        kernel: KernelFamily,
        rho: f64,
        mu: Option<Vec<f64>>,
        mu_range: (f64, f64),
        sigma: SigmaSpec,
        knots: Option<usize>,
        knot_extend: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub counts: CountSpec,
    pub x_range: (f64, f64),
    pub generator: GeneratorSpec,
    pub seed: u64,
}

impl SimConfig {
    /// d = 8, a ~ U(1,3), evenly spaced optima, c ~ U(0.5,1.5).
    pub fn bummer_default(seed: u64) -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            d: 8,
            counts: CountSpec::Range { lo: 50, hi: 200 },
            x_range: (-3.0, 3.0),
            generator: GeneratorSpec::Bummer {
                params: None,
                a_range: (1.0, 3.0),
                c_range: (0.5, 1.5),
            },
            seed,
        }
    }

    /// d = 8, ρ = 1, two positively correlated blocks of species.
    pub fn mvgp_default(seed: u64) -> Self {
        Self {
            n_train: 500,
            n_test: 200,
            d: 8,
            counts: CountSpec::Range { lo: 50, hi: 200 },
            x_range: (-3.0, 3.0),
            generator: GeneratorSpec::Mvgp {
                kernel: KernelFamily::Exponential,
                rho: 1.0,
                mu: None,
                mu_range: (0.5, 2.0),
                sigma: SigmaSpec::Block {
                    groups: 2,
                    within: 0.7,
                    between: -0.3,
                    tau: 1.0,
                },
                knots: None,
                knot_extend: 1.5,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.n_train < 2 {
            return Err(Error::invalid_arg(
                "need d ≥ 1 and at least two training rows",
            ));
        }
        if !(self.x_range.0 < self.x_range.1) {
            return Err(Error::invalid_arg("covariate range must be increasing"));
        }
        match self.counts {
            CountSpec::Fixed { m } if m == 0 => {
                return Err(Error::invalid_arg("counts per sample must be positive"))
            }
            CountSpec::Range { lo, hi } if lo == 0 || lo > hi => {
                return Err(Error::invalid_arg(
                    "count range must be positive and ordered",
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Generating values, kept apart from the dataset handed to models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLedger {
    pub note: String,
    pub config: SimConfig,
    /// `(row_id, covariate)` for every masked row.
    pub test_covariates: Vec<(usize, f64)>,
    pub params: TruthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TruthParams {
    Bummer(BummerParams),
    Mvgp {
        mu: Vec<f64>,
        sigma: Vec<Vec<f64>>,
        tau: Vec<f64>,
        omega: Vec<Vec<f64>>,
        rho: f64,
        knots: Option<Vec<f64>>,
        /// `α` of every row (row-major), for audit.
        log_alpha: Vec<Vec<f64>>,
    },
}

impl TruthLedger {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth ledger serializes")
    }

    /// Covariates with the masked rows restored.
    pub fn unmasked(&self, cs: &CovariateSet) -> Result<CovariateSet> {
        let mut obs = cs.observed().to_vec();
        obs.extend_from_slice(&self.test_covariates);
        obs.sort_by_key(|p| p.0);
        CovariateSet::new(obs, vec![], cs.n_rows())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub counts: CompositionMatrix,
    /// Training rows observed, test rows missing.
    pub covariates: CovariateSet,
    pub truth: TruthLedger,
}

fn species_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("sp{j:02}")).collect()
}

/// Dirichlet draw through independent gammas; degenerate draws fall back to
/// a point mass on the largest `α`.
fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map(|d| d.sample(rng)).unwrap_or(0.0))
        .collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 && s.is_finite() {
        g.into_iter().map(|v| v / s).collect()
    } else {
        let k = alpha
            .iter()
            .enumerate()
            .fold(0, |b, (i, &a)| if a > alpha[b] { i } else { b });
        (0..alpha.len())
            .map(|i| if i == k { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Multinomial draw by sequential binomials.
fn multinomial<R: Rng + ?Sized>(m: u32, p: &[f64], rng: &mut R) -> Vec<u32> {
    let mut left = m as u64;
    let mut rest = 1.0;
    let mut out = vec![0u32; p.len()];
    for (j, &pj) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == p.len() {
            out[j] = left as u32;
            break;
        }
        let q = if rest > 0.0 {
            (pj / rest).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let k = Binomial::new(left, q).map(|b| b.sample(rng)).unwrap_or(0);
        out[j] = k as u32;
        left -= k;
        rest -= pj;
    }
    out
}

/// Counts from per-row `α` and a count spec.
pub fn draw_counts<R: Rng + ?Sized>(
    alpha: &[Vec<f64>],
    counts: CountSpec,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    alpha
        .iter()
        .map(|a| {
            let m = match counts {
                CountSpec::Fixed { m } => m,
                CountSpec::Range { lo, hi } => rng.random_range(lo..=hi),
            };
            let p = dirichlet(a, rng);
            multinomial(m, &p, rng)
        })
        .collect()
}

/// Draws one dataset. Rows `0..n_train` are calibration rows; the remaining
/// `n_test` rows have their covariates masked.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_train + cfg.n_test;
    let d = cfg.d;
    let (lo, hi) = cfg.x_range;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let train_cs = CovariateSet::new(
        (0..cfg.n_train).map(|i| (i, x[i])).collect(),
        vec![],
        cfg.n_train,
    )?;
    let (log_alpha, params) = match &cfg.generator {
        GeneratorSpec::Bummer {
            params,
            a_range,
            c_range,
        } => {
            let p = match params {
                Some(p) => {
                    if p.a.len() != d {
                        return Err(Error::invalid_arg("BUMMER parameters do not match d"));
                    }
                    p.clone()
                }
                None => {
                    let a = (0..d)
                        .map(|_| rng.random_range(a_range.0..=a_range.1))
                        .collect();
                    let b = (0..d)
                        .map(|j| {
                            if d == 1 {
                                0.5 * (lo + hi)
                            } else {
                                lo + (hi - lo) * j as f64 / (d - 1) as f64
                            }
                        })
                        .collect();
                    let c2 = (0..d)
                        .map(|_| rng.random_range(c_range.0..=c_range.1).powi(2))
                        .collect();
                    BummerParams::new(a, b, c2)?
                }
            };
            let la = x.iter().map(|&xi| p.log_alpha(xi)).collect();
            (la, TruthParams::Bummer(p))
        }
        GeneratorSpec::Mvgp {
            kernel,
            rho,
            mu,
            mu_range,
            sigma,
            knots,
            knot_extend,
        } => {
            let sig = sigma.matrix(d)?;
            let r_upper = cholesky_lower(&sig, 0.0)?.transpose();
            let mu: Vec<f64> = match mu {
                Some(m) if m.len() == d => m.clone(),
                Some(_) => return Err(Error::invalid_arg("mu has the wrong length")),
                None => (0..d)
                    .map(|_| rng.random_range(mu_range.0..=mu_range.1))
                    .collect(),
            };
            let k = CorrelationKernel::new(*kernel, *rho)?;
            // w: n × d field before species mixing
            let (w, knot_locs) = match knots {
                None => {
                    let c = gram(&x, &k);
                    let l = cholesky_lower(&c, 1e-10)?;
                    let xi = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    (l * xi, None)
                }
                Some(ell) => {
                    let grid = make_knots(&train_cs, *ell, *knot_extend)?;
                    let basis = LowRankBasis::build(&x, &grid, &k)?;
                    let lk = basis.knot_chol_lower().clone();
                    let xi = DMatrix::from_fn(*ell, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let eta = lk * xi;
                    (basis.rows() * eta, Some(grid.locations().to_vec()))
                }
            };
            let zeta = w * &r_upper;
            let la: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..d).map(|j| mu[j] + zeta[(i, j)]).collect())
                .collect();
            let tau: Vec<f64> = (0..d).map(|j| sig[(j, j)].sqrt()).collect();
            let omega = (0..d)
                .map(|i| (0..d).map(|j| sig[(i, j)] / (tau[i] * tau[j])).collect())
                .collect();
            let params = TruthParams::Mvgp {
                mu,
                sigma: (0..d)
                    .map(|i| sig.row(i).iter().copied().collect())
                    .collect(),
                tau,
                omega,
                rho: *rho,
                knots: knot_locs,
                log_alpha: Vec::new(),
            };
            (la, params)
        }
    };
    let alpha: Vec<Vec<f64>> = log_alpha
        .iter()
        .map(|r| r.iter().map(|v| v.clamp(-30.0, 30.0).exp()).collect())
        .collect();
    let rows = draw_counts(&alpha, cfg.counts, &mut rng);
    let counts = CompositionMatrix::new(rows, species_names(d))?;
    let covariates = CovariateSet::new(
        (0..cfg.n_train).map(|i| (i, x[i])).collect(),
        (cfg.n_train..n).collect(),
        n,
    )?;
    let params = match params {
        TruthParams::Mvgp {
            mu,
            sigma,
            tau,
            omega,
            rho,
            knots,
            ..
        } => TruthParams::Mvgp {
            mu,
            sigma,
            tau,
            omega,
            rho,
            knots,
            log_alpha,
        },
        other => other,
    };
    Ok(SimOutput {
        counts,
        covariates,
        truth: TruthLedger {
            note: SCENARIO_NOTE.to_string(),
            config: cfg.clone(),
            test_covariates: (cfg.n_train..n).map(|i| (i, x[i])).collect(),
            params,
        },
    })
}

/// Correlated latent curves over a covariate grid.
#[derive(Debug, Clone)]
pub struct CurveDemo {
    pub grid: Vec<f64>,
    /// One realization, `grid × d`.
    pub curves: DMatrix<f64>,
    /// Generating correlation matrix.
    pub correlation: DMatrix<f64>,
    /// Correlation pooled over `replicates` independent realizations.
    pub empirical: DMatrix<f64>,
}

impl CurveDemo {
    pub fn curves_csv(&self) -> String {
        let d = self.curves.ncols();
        let mut s = String::from("x");
        for j in 1..=d {
            s.push_str(&format!(",species{j}"));
        }
        s.push('\n');
        for (g, x) in self.grid.iter().enumerate() {
            s.push_str(&format!("{x}"));
            for j in 0..d {
                s.push_str(&format!(",{}", self.curves[(g, j)]));
            }
            s.push('\n');
        }
        s
    }

    pub fn correlation_csv(m: &DMatrix<f64>) -> String {
        let d = m.ncols();
        let mut s = String::from("species");
        for j in 1..=d {
            s.push_str(&format!(",species{j}"));
        }
        s.push('\n');
        for i in 0..d {
            s.push_str(&format!("species{}", i + 1));
            for j in 0..d {
                s.push_str(&format!(",{}", m[(i, j)]));
            }
            s.push('\n');
        }
        s
    }
}

/// Draws latent curves `ζ ~ N(0, C ⊗ Σ)` on `grid`.
pub fn demo_correlated_gps(
    d: usize,
    kernel: &CorrelationKernel,
    sigma: &DMatrix<f64>,
    grid: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<CurveDemo> {
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::invalid_arg(format!("covariance must be {d}×{d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_upper = cholesky_lower(sigma, 0.0)
        .map_err(|_| Error::invalid_arg("covariance is not positive definite"))?
        .transpose();
    let l = cholesky_lower(&gram(grid, kernel), 1e-10)?;
    let g = grid.len();
    let mut draw = || {
        let xi = DMatrix::from_fn(g, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &l * xi * &r_upper
    };
    let curves = draw();
    let mut sum = DVector::<f64>::zeros(d);
    let mut sq = DMatrix::<f64>::zeros(d, d);
    let mut count = 0.0;
    for _ in 0..replicates.max(1) {
        let z = draw();
        for i in 0..g {
            let row = z.row(i).transpose();
            sum += &row;
            sq += &row * row.transpose();
            count += 1.0;
        }
    }
    let mean = sum / count;
    let cov = sq / count - &mean * mean.transpose();
    let empirical = DMatrix::from_fn(d, d, |i, j| {
        cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()
    });
    let sd: Vec<f64> = (0..d).map(|j| sigma[(j, j)].sqrt()).collect();
    let correlation = DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] / (sd[i] * sd[j]));
    Ok(CurveDemo {
        grid: grid.to_vec(),
        curves,
        correlation,
        empirical,
    })
}

/// The four-species correlation used for the illustration.
pub fn demo_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.87, -0.76, -0.6, //
            0.87, 1.0, -0.7, -0.57, //
            -0.76, -0.7, 1.0, 0.88, //
            -0.6, -0.57, 0.88, 1.0,
        ],
    )
}
