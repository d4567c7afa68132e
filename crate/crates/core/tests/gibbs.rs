use mvgp_core::dataio::CovariateSet;
use mvgp_core::mvgp::{MvgpConfig, MvgpModel};
use mvgp_core::sampler::{fit_mvgp, ChainConfig, MvgpChain, SweepOptions, XUpdateMode, STAGES};
use mvgp_core::sim::{simulate, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(n_knots: usize, n_test: usize, config: MvgpConfig) -> MvgpModel {
    let mut cfg = SimConfig::mvgp_default(3);
    cfg.n_train = 40;
    cfg.n_test = n_test;
    cfg.d = 3;
    let sim = simulate(&cfg).unwrap();
    MvgpModel::new(sim.counts, &sim.covariates, MvgpConfig { n_knots, ..config }).unwrap()
}

fn short(seed: u64) -> ChainConfig {
    ChainConfig {
        iterations: 60,
        burn_in: 20,
        thin: 2,
        chains: 2,
        seed,
        adapt_until: 20,
    }
}

#[test]
fn row_local_and_full_rebuild_agree_draw_for_draw() {
    let model = small_model(8, 5, MvgpConfig::default());
    let a = fit_mvgp(&model, &short(4), SweepOptions { x_update: XUpdateMode::RowLocal }).unwrap();
    let b = fit_mvgp(&model, &short(4), SweepOptions { x_update: XUpdateMode::FullRebuild }).unwrap();
    let (na, ta) = a.samples.tables();
    let (nb, tb) = b.samples.tables();
    assert_eq!(na, nb);
    assert_eq!(ta, tb);
}

#[test]
fn same_seed_same_chains() {
    let model = small_model(8, 5, MvgpConfig::default());
    let a = fit_mvgp(&model, &short(9), SweepOptions::default()).unwrap();
    let b = fit_mvgp(&model, &short(9), SweepOptions::default()).unwrap();
    assert_eq!(a.samples.tables(), b.samples.tables());
    let c = fit_mvgp(&model, &short(10), SweepOptions::default()).unwrap();
    assert_ne!(a.samples.tables(), c.samples.tables());
}

#[test]
fn sweep_never_touches_data() {
    let model = small_model(8, 5, MvgpConfig::default());
    let before = model.data().clone();
    let cs_before: CovariateSet = model.covariates().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let state = model.initial_state(0, &mut rng);
    let mut chain = MvgpChain::new(&model, state).unwrap();
    let cfg = short(1);
    for it in 1..=10 {
        chain.sweep(&model, it, &cfg, &SweepOptions::default(), &mut rng).unwrap();
    }
    assert_eq!(model.data(), &before);
    assert_eq!(model.covariates(), &cs_before);
    assert!(chain.loglik().is_finite());
}

#[test]
fn no_missing_rows_means_no_x_work() {
    let model = small_model(8, 0, MvgpConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let state = model.initial_state(0, &mut rng);
    let mut chain = MvgpChain::new(&model, state).unwrap();
    for it in 1..=5 {
        chain.sweep(&model, it, &short(2), &SweepOptions::default(), &mut rng).unwrap();
    }
    let x = STAGES.iter().position(|s| *s == "x").unwrap();
    assert_eq!(chain.stage_flops[x], 0);
    assert!(chain.stage_flops[0] > 0);
}

#[test]
fn x_stage_cost_is_quadratic_in_knots() {
    let mut per_sweep = Vec::new();
    let ells = [10usize, 20, 40];
    for &ell in &ells {
        let model = small_model(ell, 6, MvgpConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = model.initial_state(0, &mut rng);
        let mut chain = MvgpChain::new(&model, state).unwrap();
        let sweeps = 40;
        for it in 1..=sweeps {
            chain.sweep(&model, it, &short(5), &SweepOptions::default(), &mut rng).unwrap();
        }
        let x = STAGES.iter().position(|s| *s == "x").unwrap();
        per_sweep.push(chain.stage_flops[x] as f64 / sweeps as f64);
    }
    let lx: Vec<f64> = ells.iter().map(|&l| (l as f64).ln()).collect();
    let ly: Vec<f64> = per_sweep.iter().map(|f| f.ln()).collect();
    let mx = lx.iter().sum::<f64>() / 3.0;
    let my = ly.iter().sum::<f64>() / 3.0;
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope - 2.0).abs() <= 0.3, "slope {slope}, flops {per_sweep:?}");
}

#[test]
fn overdispersion_and_spline_variants_run() {
    let od = small_model(
        8,
        4,
        MvgpConfig {
            overdispersion: true,
            ..MvgpConfig::default()
        },
    );
    let fit = fit_mvgp(&od, &short(3), SweepOptions::default()).unwrap();
    assert!(fit.samples.pooled().all(|s| s.overdisp.is_some()));
    assert!(fit.acceptance[0].iter().any(|(n, _)| n == "eps_phi"));

    let gam = small_model(8, 4, MvgpConfig::gam(8));
    let fit = fit_mvgp(&gam, &short(3), SweepOptions::default()).unwrap();
    assert!(fit.rhat.iter().all(|(n, _)| n != "rho"));
    let x: Vec<f64> = fit.x_draws(0);
    assert!(x.iter().all(|v| v.is_finite()));
}

#[test]
fn figure_data_shapes() {
    let model = small_model(8, 4, MvgpConfig::default());
    let fit = fit_mvgp(&model, &short(6), SweepOptions::default()).unwrap();
    let grid = [-1.0, 0.0, 1.0];
    let curves = fit.response_curves(&model, &grid).unwrap();
    assert_eq!(curves.shape(), (3, 3));
    for g in 0..3 {
        assert!((curves.row(g).sum() - 1.0).abs() < 1e-12);
    }
    let corr = fit.mean_correlation();
    assert_eq!(corr.shape(), (3, 3));
    for i in 0..3 {
        assert!((corr[(i, i)] - 1.0).abs() < 1e-12);
    }
    assert_eq!(fit.samples.chain_csv(0).lines().count(), 1 + short(6).retained());
}
