use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PointPrediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeshrinkKind {
    #[default]
    Linear,
    /// Natural cubic spline with 4 degrees of freedom.
    Spline,
}

/// Regression of `x` on the raw weighted-average estimate `x̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Deshrink {
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// Natural-spline basis knots (boundary knots first and last) and
    /// coefficients (intercept, linear, then one per interior knot).
    Spline {
        knots: Vec<f64>,
        coef: Vec<f64>,
    },
}

impl Deshrink {
    pub fn apply(&self, xhat: f64) -> f64 {
        match self {
            Deshrink::Linear { intercept, slope } => intercept + slope * xhat,
            Deshrink::Spline { knots, coef } => natural_spline_row(xhat, knots)
                .iter()
                .zip(coef)
                .map(|(b, c)| b * c)
                .sum(),
        }
    }

    fn fit(kind: DeshrinkKind, xhat: &[f64], x: &[f64]) -> Result<Self> {
        let (mh, sh) = crate::dataio::mean_sd(xhat);
        if !(sh > 1e-12 * (1.0 + mh.abs())) || xhat.len() < 3 {
            return Err(Error::Model(
                "deshrinking regression is degenerate: weighted-average estimates do not vary"
                    .into(),
            ));
        }
        match kind {
            DeshrinkKind::Linear => {
                let mx = x.iter().sum::<f64>() / x.len() as f64;
                let sxy: f64 = xhat.iter().zip(x).map(|(h, v)| (h - mh) * (v - mx)).sum();
                let sxx: f64 = xhat.iter().map(|h| (h - mh).powi(2)).sum();
                let slope = sxy / sxx;
                Ok(Deshrink::Linear {
                    intercept: mx - slope * mh,
                    slope,
                })
            }
            DeshrinkKind::Spline => {
                let mut sorted = xhat.to_vec();
                sorted.sort_by(f64::total_cmp);
                let q = |p: f64| crate::dataio::quantile(&sorted, p);
                let knots = vec![
                    sorted[0],
                    q(0.25),
                    q(0.5),
                    q(0.75),
                    sorted[sorted.len() - 1],
                ];
                if knots.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Model(
                        "spline deshrinking needs spread-out estimates".into(),
                    ));
                }
                let n = xhat.len();
                let p = knots.len();
                let a = DMatrix::from_fn(n, p, |i, j| natural_spline_row(xhat[i], &knots)[j]);
                let b = DVector::from_column_slice(x);
                let svd = a.svd(true, true);
                let coef = svd
                    .solve(&b, 1e-12)
                    .map_err(|e| Error::Numerical(format!("spline deshrinking: {e}")))?;
                Ok(Deshrink::Spline {
                    knots,
                    coef: coef.iter().copied().collect(),
                })
            }
        }
    }
}

/// Natural cubic spline basis (intercept, x, and K−2 truncated-power terms),
/// linear beyond the boundary knots.
fn natural_spline_row(x: f64, knots: &[f64]) -> Vec<f64> {
    let k = knots.len();
    let last = knots[k - 1];
    let dk = |j: usize| {
        let c = |t: f64| (x - t).max(0.0).powi(3);
        (c(knots[j]) - c(last)) / (last - knots[j])
    };
    let mut row = vec![1.0, x];
    let d_km1 = dk(k - 2);
    for j in 0..k - 2 {
        row.push(dk(j) - d_km1);
    }
    row
}

/// Weighted-averaging calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaFit {
    /// Optimum per species; `None` for species absent from the calibration
    /// set.
    pub optima: Vec<Option<f64>>,
    pub deshrink: Deshrink,
    /// Optima from each bootstrap resample (`None` where the species was
    /// absent from the resample).
    pub boot_optima: Vec<Vec<Option<f64>>>,
    pub rmse_boot: f64,
}

fn normalize(row: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

fn optima_of(props: &[Vec<f64>], x: &[f64], rows: &[usize], d: usize) -> Vec<Option<f64>> {
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for &i in rows {
        for j in 0..d {
            num[j] += props[i][j] * x[i];
            den[j] += props[i][j];
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, w)| if *w > 0.0 { Some(n / w) } else { None })
        .collect()
}

/// Weighted average of optima over species present in both `p` and the fit.
fn raw_estimate(p: &[f64], optima: &[Option<f64>]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (pj, oj) in p.iter().zip(optima) {
        if let Some(o) = oj {
            num += pj * o;
            den += pj;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Fits WA with `boot` bootstrap resamples. `props` rows are compositions
/// (counts or proportions; each row is renormalized).
pub fn wa_fit<R: Rng + ?Sized>(
    props: &[Vec<f64>],
    x: &[f64],
    boot: usize,
    kind: DeshrinkKind,
    rng: &mut R,
) -> Result<WaFit> {
    let n = props.len();
    if n != x.len() || n < 3 {
        return Err(Error::invalid_arg(
            "WA needs at least three calibration rows with covariates",
        ));
    }
    if boot < 1 {
        return Err(Error::invalid_arg("bootstrap count must be at least 1"));
    }
    let d = props[0].len();
    let props: Vec<Vec<f64>> = props.iter().map(|r| normalize(r)).collect();
    if props.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid_data("composition with zero total"));
    }
    let all: Vec<usize> = (0..n).collect();
    let optima = optima_of(&props, x, &all, d);
    let in_sample: Vec<f64> = props
        .iter()
        .filter_map(|p| raw_estimate(p, &optima))
        .collect();
    let (m_in, sd_in) = crate::dataio::mean_sd(&in_sample);
    if !(sd_in > 1e-12 * (1.0 + m_in.abs())) {
        return Err(Error::Model(
            "deshrinking regression is degenerate: weighted-average estimates do not vary".into(),
        ));
    }
    let dropped = optima.iter().filter(|o| o.is_none()).count();
    if dropped > 0 {
        warn!("weighted averaging: {dropped} species with zero abundance dropped");
    }
    // out-of-bootstrap raw estimates
    let mut boot_optima = Vec::with_capacity(boot);
    let mut oob_pairs: Vec<(usize, f64)> = Vec::new();
    for _ in 0..boot {
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        for &i in &sample {
            in_bag[i] = true;
        }
        let bo = optima_of(&props, x, &sample, d);
        for i in (0..n).filter(|&i| !in_bag[i]) {
            if let Some(h) = raw_estimate(&props[i], &bo) {
                oob_pairs.push((i, h));
            }
        }
        boot_optima.push(bo);
    }
    if oob_pairs.len() < 3 {
        return Err(Error::Model("too few out-of-bootstrap predictions".into()));
    }
    let xh: Vec<f64> = oob_pairs.iter().map(|p| p.1).collect();
    let xt: Vec<f64> = oob_pairs.iter().map(|p| x[p.0]).collect();
    let deshrink = Deshrink::fit(kind, &xh, &xt)?;
    // average out-of-bootstrap prediction per row, then RMSE
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for (i, h) in &oob_pairs {
        sum[*i] += deshrink.apply(*h);
        cnt[*i] += 1;
    }
    let errs: Vec<f64> = (0..n)
        .filter(|&i| cnt[i] > 0)
        .map(|i| (x[i] - sum[i] / cnt[i] as f64).powi(2))
        .collect();
    let rmse_boot = (errs.iter().sum::<f64>() / errs.len() as f64).sqrt();
    Ok(WaFit {
        optima,
        deshrink,
        boot_optima,
        rmse_boot,
    })
}

impl WaFit {
    /// Raw (not deshrunk) estimate for a composition.
    pub fn raw(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.optima.len() {
            return Err(Error::invalid_arg(
                "composition has the wrong number of species",
            ));
        }
        if !(y.iter().sum::<f64>() > 0.0) {
            return Err(Error::invalid_arg("composition has zero total"));
        }
        raw_estimate(&normalize(y), &self.optima)
            .ok_or_else(|| Error::invalid_data("composition contains no calibrated species"))
    }
}

/// Deshrunk point estimate with a normal 95% interval.
pub fn wa_predict(fit: &WaFit, y_new: &[f64]) -> Result<PointPrediction> {
    let raw = fit.raw(y_new)?;
    let point = fit.deshrink.apply(raw);
    let p = normalize(y_new);
    let preds: Vec<f64> = fit
        .boot_optima
        .iter()
        .filter_map(|bo| raw_estimate(&p, bo))
        .map(|h| fit.deshrink.apply(h))
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

    #[test]
    fn identical_rows_cannot_deshrink() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let props = vec![vec![0.5, 0.5]; 10];
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(wa_fit(&props, &x, 50, DeshrinkKind::Linear, &mut rng).is_err());
    }

    #[test]
    fn single_species_collapses_to_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let props: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0, 0.0]).collect();
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = wa_fit(&props, &x, 20, DeshrinkKind::Linear, &mut rng);
        // x̂ is constant, so deshrinking is degenerate, but the optimum is defined
        assert!(fit.is_err());
        let o = optima_of(&props, &x, &(0..10).collect::<Vec<_>>(), 2);
        assert_eq!(o[0], Some(4.5));
        assert_eq!(o[1], None);
    }

    #[test]
    fn disjoint_supports_give_monotone_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut props = Vec::new();
        let mut x = Vec::new();
        for i in 0..40 {
            let xi = -2.0 + 4.0 * i as f64 / 39.0;
            let p2 = if xi > 0.0 { 0.2 + 0.6 * xi / 2.0 } else { 0.0 };
            props.push(vec![1.0 - p2, p2]);
            x.push(xi);
        }
        // species 1 only below zero: zero it above zero
        for (p, &xi) in props.iter_mut().zip(&x) {
            if xi > 0.0 {
                p[0] = 0.0;
                p[1] = 1.0;
            }
        }
        for (p, &xi) in props.iter_mut().zip(&x) {
            if xi <= 0.0 {
                p[0] = 1.0;
                p[1] = 0.0;
            }
        }
        let fit = wa_fit(&props, &x, 100, DeshrinkKind::Linear, &mut rng).unwrap();
        let (o1, o2) = (fit.optima[0].unwrap(), fit.optima[1].unwrap());
        assert!(o1 < 0.0 && o2 > 0.0);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=10 {
            let q = k as f64 / 10.0;
            let v = wa_predict(&fit, &[1.0 - q, q]).unwrap().point;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn single_species_composition_gives_its_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let props: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let t = i as f64 / 29.0;
                vec![1.0 - t + 0.01, t + 0.01, 0.5]
            })
            .collect();
        let x: Vec<f64> = (0..30).map(|i| i as f64 / 29.0 * 10.0).collect();
        let mut fit = wa_fit(&props, &x, 100, DeshrinkKind::Linear, &mut rng).unwrap();
        assert!((fit.raw(&[0.0, 3.0, 0.0]).unwrap() - fit.optima[1].unwrap()).abs() < 1e-12);
        fit.deshrink = Deshrink::Linear {
            intercept: 0.0,
            slope: 1.0,
        };
        let y = [2.0, 1.0, 4.0];
        assert!((wa_predict(&fit, &y).unwrap().point - fit.raw(&y).unwrap()).abs() < 1e-12);
        for o in fit.optima.iter().flatten() {
            assert!((0.0..=10.0).contains(o));
        }
    }

    #[test]
    fn spline_deshrink_is_linear_outside_boundary() {
        let knots = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let d = Deshrink::Spline {
            knots: knots.clone(),
            coef: vec![0.3, 1.1, 0.5, -0.2, 0.4],
        };
        let f = |x: f64| d.apply(x);
        let s1 = f(6.0) - f(5.0);
        let s2 = f(7.0) - f(6.0);
        assert!((s1 - s2).abs() < 1e-9);
        let s3 = f(-2.0) - f(-3.0);
        let s4 = f(-1.0) - f(-2.0);
        assert!((s3 - s4).abs() < 1e-9);
    }

    #[test]
    fn spline_fit_recovers_smooth_curve() {
        let xh: Vec<f64> = (0..200).map(|i| i as f64 / 199.0 * 4.0).collect();
        let x: Vec<f64> = xh.iter().map(|h| 0.5 * h + 0.1 * h * h).collect();
        let d = Deshrink::fit(DeshrinkKind::Spline, &xh, &x).unwrap();
        for (h, v) in xh.iter().zip(&x) {
            assert!((d.apply(*h) - v).abs() < 0.02);
        }
    }
}
