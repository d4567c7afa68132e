use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{to_proportions, PointPrediction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    InverseDistance,
}

/// `Σ_j (√p_j − √q_j)²`; 0 for identical compositions, 2 for disjoint ones.
pub fn squared_chord(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum()
}

/// Calibration set plus the bootstrap resamples used for intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatFit {
    pub props: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub k: usize,
    pub weighting: Weighting,
    /// Multiplicity of each calibration row in each bootstrap resample.
    pub boot_counts: Vec<Vec<u32>>,
    /// Root mean square out-of-bootstrap prediction error.
    pub rmse_boot: f64,
}

/// Weighted mean of `x` over the `k` nearest rows, walking `order` (rows by
/// increasing distance) and counting each row `mult(row)` times.
fn knn_mean(
    order: &[(f64, usize)],
    x: &[f64],
    k: usize,
    weighting: Weighting,
    mult: impl Fn(usize) -> u32,
) -> Option<f64> {
    let mut need = k as u32;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(dist, i) in order {
        if need == 0 {
            break;
        }
        let m = mult(i).min(need);
        if m == 0 {
            continue;
        }
        need -= m;
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::InverseDistance => 1.0 / dist.max(1e-12),
        };
        num += m as f64 * w * x[i];
        den += m as f64 * w;
    }
    (need == 0).then(|| num / den)
}

fn sorted_distances(p: &[f64], props: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let mut order: Vec<(f64, usize)> = props
        .iter()
        .enumerate()
        .map(|(i, q)| (squared_chord(p, q), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order
}

/// Stores the calibration set and draws `boot` resamples once.
pub fn mat_fit<R: Rng + ?Sized>(
    comps: &[Vec<f64>],
    x: &[f64],
    k: usize,
    weighting: Weighting,
    boot: usize,
    rng: &mut R,
) -> Result<MatFit> {
    let n = comps.len();
    if n != x.len() {
        return Err(Error::invalid_arg(
            "compositions and covariates differ in length",
        ));
    }
    if k < 1 || k > n {
        return Err(Error::invalid_arg(format!("k = {k} must lie in 1..={n}")));
    }
    let props = to_proportions(comps)?;
    let boot_counts: Vec<Vec<u32>> = (0..boot)
        .map(|_| {
            let mut c = vec![0u32; n];
            for _ in 0..n {
                c[rng.random_range(0..n)] += 1;
            }
            c
        })
        .collect();
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for i in 0..n {
        let order = sorted_distances(&props[i], &props);
        for c in boot_counts.iter().filter(|c| c[i] == 0) {
            if let Some(v) = knn_mean(&order, x, k, weighting, |r| c[r]) {
                sum[i] += v;
                cnt[i] += 1;
            }
        }
    }
    let errs: Vec<f64> = (0..n)
        .filter(|&i| cnt[i] > 0)
        .map(|i| (x[i] - sum[i] / cnt[i] as f64).powi(2))
        .collect();
    let rmse_boot = if errs.is_empty() {
        0.0
    } else {
        (errs.iter().sum::<f64>() / errs.len() as f64).sqrt()
    };
    Ok(MatFit {
        props,
        x: x.to_vec(),
        k,
        weighting,
        boot_counts,
        rmse_boot,
    })
}

/// k-NN point estimate; the interval is `± 1.96·√(bootstrap variance +
/// rmse_boot²)`.
pub fn mat_predict(fit: &MatFit, y_new: &[f64]) -> Result<PointPrediction> {
    let d = fit.props.first().map_or(0, Vec::len);
    if y_new.len() != d {
        return Err(Error::invalid_arg(format!(
            "composition has {} species, expected {d}",
            y_new.len()
        )));
    }
    let p = to_proportions(&[y_new.to_vec()])?.remove(0);
    let order = sorted_distances(&p, &fit.props);
    let point = knn_mean(&order, &fit.x, fit.k, fit.weighting, |_| 1)
        .ok_or_else(|| Error::invalid_arg("not enough calibration rows"))?;
    let preds: Vec<f64> = fit
        .boot_counts
        .iter()
        .filter_map(|c| knn_mean(&order, &fit.x, fit.k, fit.weighting, |r| c[r]))
        .collect();
    let var = if preds.len() > 1 {
        let m = preds.iter().sum::<f64>() / preds.len() as f64;
        preds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (preds.len() - 1) as f64
    } else {
        0.0
    };
    let half = 1.96 * (var + fit.rmse_boot.powi(2)).sqrt();
    PointPrediction::new(point, point - half, point + half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn calib(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut c = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xi: f64 = rng.random_range(-2.0..2.0);
            c.push(vec![
                (xi + 3.0) * rng.random::<f64>() + 0.1,
                (3.0 - xi) * rng.random::<f64>() + 0.1,
                1.0,
            ]);
            x.push(xi);
        }
        (c, x)
    }

    #[test]
    fn chord_bounds() {
        assert_eq!(squared_chord(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((squared_chord(&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.5]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_nn_reproduces_calibration_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, x) = calib(&mut rng, 40);
        let fit = mat_fit(&c, &x, 1, Weighting::Uniform, 50, &mut rng).unwrap();
        for i in [0, 7, 33] {
            assert_eq!(mat_predict(&fit, &c[i]).unwrap().point, x[i]);
        }
    }

    #[test]
    fn full_neighbourhood_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, x) = calib(&mut rng, 25);
        let fit = mat_fit(&c, &x, 25, Weighting::Uniform, 20, &mut rng).unwrap();
        let mean = x.iter().sum::<f64>() / 25.0;
        assert!((mat_predict(&fit, &[1.0, 2.0, 3.0]).unwrap().point - mean).abs() < 1e-12);
    }

    #[test]
    fn bad_k_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, x) = calib(&mut rng, 5);
        assert!(mat_fit(&c, &x, 0, Weighting::Uniform, 5, &mut rng).is_err());
        assert!(mat_fit(&c, &x, 6, Weighting::Uniform, 5, &mut rng).is_err());
    }

    #[test]
    fn inverse_distance_prefers_close_rows() {
        let c = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
        let x = vec![0.0, 1.0, 10.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fit = mat_fit(&c, &x, 3, Weighting::InverseDistance, 5, &mut rng).unwrap();
        let v = mat_predict(&fit, &[0.95, 0.05]).unwrap().point;
        assert!(v < 10.0 / 3.0 + 1e-9 && v > 0.0);
    }
}
