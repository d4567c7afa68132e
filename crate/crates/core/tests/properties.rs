use mvgp_core::baselines::{mat_fit, mat_predict, squared_chord, wa_fit, DeshrinkKind, Weighting};
use mvgp_core::dataio::{kfold_split, noanalog_split, CovariateSet};
use mvgp_core::eval::{crps_from_draws, Prediction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simplex(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, d).prop_filter_map("zero total", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
    })
}

/// The O(K²) definition.
fn naive_crps(draws: &[f64], t: f64) -> f64 {
    let k = draws.len() as f64;
    let a = draws.iter().map(|y| (y - t).abs()).sum::<f64>() / k;
    let b: f64 = draws
        .iter()
        .flat_map(|y| draws.iter().map(move |z| (y - z).abs()))
        .sum();
    a - b / (2.0 * k * k)
}

proptest! {
    #[test]
    fn crps_matches_quadratic_definition(
        draws in prop::collection::vec(-50.0f64..50.0, 2..60),
        t in -60.0f64..60.0,
    ) {
        let fast = crps_from_draws(&draws, t).unwrap();
        let slow = naive_crps(&draws, t);
        prop_assert!(fast >= 0.0);
        prop_assert!((fast - slow.max(0.0)).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn crps_of_point_mass_is_absolute_error(p in -100.0f64..100.0, t in -100.0f64..100.0, k in 2usize..50) {
        prop_assert_eq!(crps_from_draws(&vec![p; k], t).unwrap(), (p - t).abs());
        let interval = Prediction::Interval { point: p, lower: p - 1.0, upper: p + 1.0 };
        prop_assert_eq!(interval.crps(t).unwrap(), (p - t).abs());
    }

    #[test]
    fn chord_is_a_metric_and_its_square_is_a_semimetric(
        p in simplex(5), q in simplex(5), r in simplex(5),
    ) {
        let d2 = squared_chord(&p, &q);
        prop_assert!(d2 >= 0.0);
        prop_assert!(squared_chord(&p, &p) == 0.0);
        prop_assert_eq!(d2, squared_chord(&q, &p));
        prop_assert!(d2 <= 2.0 + 1e-12);
        let c = |a: &[f64], b: &[f64]| squared_chord(a, b).sqrt();
        prop_assert!(c(&p, &r) <= c(&p, &q) + c(&q, &r) + 1e-12);
    }

    #[test]
    fn folds_partition_rows(n in 2usize..200, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 2 + ((n - 2) as f64 * k_frac) as usize;
        let f = kfold_split(n, k, seed).unwrap();
        let sizes = f.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for fold in 1..=k {
            let mut all = f.test_rows(fold);
            all.extend(f.train_rows(fold));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        prop_assert_eq!(f, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn noanalog_split_is_a_threshold(xs in prop::collection::vec(-10.0f64..10.0, 10..80), q in 0.5f64..0.95) {
        let cs = CovariateSet::fully_observed(&xs).unwrap();
        if let Ok(s) = noanalog_split(&cs, q) {
            prop_assert_eq!(s.train.len() + s.test.len(), xs.len());
            prop_assert!(s.test.iter().all(|&i| xs[i] > s.threshold));
            prop_assert!(s.train.iter().all(|&i| xs[i] <= s.threshold));
        }
    }

    #[test]
    fn wa_optima_stay_in_observed_range(
        rows in prop::collection::vec(prop::collection::vec(0u32..30, 4), 6..30),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let props: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut v: Vec<f64> = r.iter().map(|&c| c as f64).collect();
                v[i % 4] += 1.0;
                v
            })
            .collect();
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 + seed as usize % 11) % 17) as f64 - 8.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(fit) = wa_fit(&props, &x, 20, DeshrinkKind::Linear, &mut rng) {
            let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for o in fit.optima.iter().flatten() {
                prop_assert!(*o >= lo - 1e-9 && *o <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn mat_one_neighbour_returns_training_value(
        rows in prop::collection::vec(simplex(4), 3..25),
        seed in any::<u64>(),
    ) {
        let n = rows.len();
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = mat_fit(&rows, &x, 1, Weighting::Uniform, 5, &mut rng).unwrap();
        for (i, r) in rows.iter().enumerate() {
            // duplicates may tie; the prediction is then any one of them
            let p = mat_predict(&fit, r).unwrap().point;
            let ok = rows
                .iter()
                .enumerate()
                .any(|(j, s)| squared_chord(r, s) == 0.0 && x[j] == p);
            prop_assert!(ok, "row {i}: {p}");
            if !rows.iter().enumerate().any(|(j, s)| j != i && squared_chord(r, s) == 0.0) {
                prop_assert_eq!(p, x[i]);
            }
        }
    }
}
