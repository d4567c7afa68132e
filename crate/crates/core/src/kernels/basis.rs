use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::correlation::CorrelationKernel;
use crate::dataio::{mean_sd, CovariateSet};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_lower, mvn_logpdf_lower, solve_lower_in_place, solve_lower_transpose_in_place,
    FlopCounter,
};

/// Diagonal jitter added to the knot correlation matrix before factorization.
pub const KNOT_JITTER: f64 = 1e-8;

/// Strictly increasing knot locations on the working covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    locations: Vec<f64>,
}

impl KnotGrid {
    pub fn new(locations: Vec<f64>) -> Result<Self> {
        if locations.len() < 2 {
            return Err(Error::invalid_arg("a knot grid needs at least two knots"));
        }
        if locations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid_arg("knots must be strictly increasing"));
        }
        Ok(Self { locations })
    }

    /// `ell` evenly spaced points on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, ell: usize) -> Result<Self> {
        if ell < 2 {
            return Err(Error::invalid_arg("a knot grid needs at least two knots"));
        }
        let step = (hi - lo) / (ell - 1) as f64;
        let mut locations: Vec<f64> = (0..ell).map(|m| lo + m as f64 * step).collect();
        locations[ell - 1] = hi;
        Self::new(locations)
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.locations[0]
    }

    pub fn upper(&self) -> f64 {
        self.locations[self.len() - 1]
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("knot,location\n");
        for (m, v) in self.locations.iter().enumerate() {
            s.push_str(&format!("{m},{v}\n"));
        }
        s
    }
}

/// Evenly spaced knots over the observed covariate range widened by
/// `extend` sample standard deviations on each side.
pub fn make_knots(cs: &CovariateSet, ell: usize, extend: f64) -> Result<KnotGrid> {
    let values = cs.observed_values();
    if values.len() < 2 {
        return Err(Error::invalid_data(
            "knot placement needs two observed covariates",
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid_data("observed covariates are constant"));
    }
    let (_, sd) = mean_sd(&values);
    KnotGrid::linspace(lo - extend * sd, hi + extend * sd, ell)
}

/// Predictive-process basis: cached factor of the knot correlation matrix and
/// one interpolation row `z_i = c*(x_i, X*) C*⁻¹` per observation.
#[derive(Debug, Clone)]
pub struct LowRankBasis {
    kernel: CorrelationKernel,
    knots: KnotGrid,
    /// Lower factor `L` with `L Lᵀ = C* + jitter·I`.
    knot_chol_lower: DMatrix<f64>,
    knot_corr: DMatrix<f64>,
    rows: DMatrix<f64>,
    version: u64,
    flops: FlopCounter,
}

impl LowRankBasis {
    pub fn build(x_all: &[f64], knots: &KnotGrid, kernel: &CorrelationKernel) -> Result<Self> {
        let mut basis = Self::factor_only(knots, kernel)?;
        basis.rows = DMatrix::zeros(x_all.len(), knots.len());
        for (i, &x) in x_all.iter().enumerate() {
            let z = basis.basis_row(x);
            basis.rows.set_row(i, &z.transpose());
        }
        Ok(basis)
    }

    /// Factorizes the knot correlation without any observation rows.
    pub fn factor_only(knots: &KnotGrid, kernel: &CorrelationKernel) -> Result<Self> {
        let ell = knots.len();
        let c = knot_correlation(knots, kernel);
        let flops = FlopCounter::default();
        flops.add((ell * ell * ell / 3) as u64);
        let l = cholesky_lower(&c, KNOT_JITTER).map_err(|_| {
            Error::Numerical(format!(
                "knot correlation not positive definite at rho = {}",
                kernel.rho
            ))
        })?;
        Ok(Self {
            kernel: *kernel,
            knots: knots.clone(),
            knot_chol_lower: l,
            knot_corr: c,
            rows: DMatrix::zeros(0, ell),
            version: 0,
            flops,
        })
    }

    /// Interpolation row for covariate `x` via triangular solves against the
    /// cached factor, plus one refinement step against the unjittered `C*`
    /// so the jitter does not bias the interpolation. O(ℓ²).
    pub fn basis_row(&self, x: f64) -> DVector<f64> {
        let ell = self.knots.len();
        let c: Vec<f64> = self
            .knots
            .locations()
            .iter()
            .map(|&k| self.kernel.at_distance(x - k))
            .collect();
        self.flops.add(2 * ell as u64);
        let mut z = c.clone();
        solve_lower_in_place(&self.knot_chol_lower, &mut z, &self.flops);
        solve_lower_transpose_in_place(&self.knot_chol_lower, &mut z, &self.flops);
        // residual r = c − C* z (C* symmetric)
        let mut r = c;
        for (m, rm) in r.iter_mut().enumerate() {
            let col = self.knot_corr.column(m);
            *rm -= col.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        }
        self.flops.add(2 * (ell * ell) as u64);
        solve_lower_in_place(&self.knot_chol_lower, &mut r, &self.flops);
        solve_lower_transpose_in_place(&self.knot_chol_lower, &mut r, &self.flops);
        for (zm, rm) in z.iter_mut().zip(&r) {
            *zm += rm;
        }
        self.flops.add(ell as u64);
        DVector::from_vec(z)
    }

    /// `d z / d x`, the derivative of [`basis_row`](Self::basis_row).
    pub fn basis_row_derivative(&self, x: f64) -> DVector<f64> {
        let dc: Vec<f64> = self
            .knots
            .locations()
            .iter()
            .map(|&k| self.kernel.derivative(x - k))
            .collect();
        let mut z = dc.clone();
        solve_lower_in_place(&self.knot_chol_lower, &mut z, &self.flops);
        solve_lower_transpose_in_place(&self.knot_chol_lower, &mut z, &self.flops);
        let mut r = dc;
        for (m, rm) in r.iter_mut().enumerate() {
            let col = self.knot_corr.column(m);
            *rm -= col.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        }
        solve_lower_in_place(&self.knot_chol_lower, &mut r, &self.flops);
        solve_lower_transpose_in_place(&self.knot_chol_lower, &mut r, &self.flops);
        for (zm, rm) in z.iter_mut().zip(&r) {
            *zm += rm;
        }
        DVector::from_vec(z)
    }

    /// Recomputes the row for observation `i` at covariate `x`.
    pub fn replace_row(&mut self, i: usize, x: f64) {
        let z = self.basis_row(x);
        self.rows.set_row(i, &z.transpose());
        self.version += 1;
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    pub fn knots(&self) -> &KnotGrid {
        &self.knots
    }

    pub fn kernel(&self) -> &CorrelationKernel {
        &self.kernel
    }

    pub fn knot_chol_lower(&self) -> &DMatrix<f64> {
        &self.knot_chol_lower
    }

    /// Upper factor `U = Lᵀ` with `Uᵀ U = C*`.
    pub fn knot_chol_upper(&self) -> DMatrix<f64> {
        self.knot_chol_lower.transpose()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// `log N(v; 0, C*)` through the cached factor.
    pub fn knot_log_density(&self, v: &DVector<f64>) -> f64 {
        mvn_logpdf_lower(v, &self.knot_chol_lower, &self.flops)
    }
}

pub fn knot_correlation(knots: &KnotGrid, kernel: &CorrelationKernel) -> DMatrix<f64> {
    let loc = knots.locations();
    let ell = loc.len();
    DMatrix::from_fn(ell, ell, |a, b| kernel.at_distance(loc[a] - loc[b]))
}

/// Correlation matrix over an arbitrary point set.
pub fn gram(points: &[f64], kernel: &CorrelationKernel) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |a, b| kernel.at_distance(points[a] - points[b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;

    fn kernels() -> Vec<CorrelationKernel> {
        vec![
            CorrelationKernel::exponential(0.8).unwrap(),
            CorrelationKernel::matern(1.5, 0.8).unwrap(),
            CorrelationKernel::matern(2.5, 0.5).unwrap(),
        ]
    }

    #[test]
    fn knots_from_standardized_data() {
        let cs = CovariateSet::fully_observed(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let (_, sd) = mean_sd(&cs.observed_values());
        let g = make_knots(&cs, 30, 1.5).unwrap();
        assert!((g.lower() - (-2.0 - 1.5 * sd)).abs() < 1e-12);
        assert!((g.upper() - (2.0 + 1.5 * sd)).abs() < 1e-12);
        let step = (g.upper() - g.lower()) / 29.0;
        for w in g.locations().windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
        let g2 = make_knots(&cs, 2, 1.5).unwrap();
        assert_eq!(g2.len(), 2);
        let flat = CovariateSet::fully_observed(&[1.0, 1.0]).unwrap();
        assert!(make_knots(&flat, 5, 1.5).is_err());
    }

    #[test]
    fn linspace_endpoints() {
        let g = KnotGrid::linspace(-3.5, 3.5, 30).unwrap();
        assert_eq!(g.lower(), -3.5);
        assert_eq!(g.upper(), 3.5);
        let step = 7.0 / 29.0;
        for w in g.locations().windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_at_knots() {
        let knots = KnotGrid::linspace(-2.0, 2.0, 9).unwrap();
        for k in kernels() {
            let b = LowRankBasis::build(knots.locations(), &knots, &k).unwrap();
            let err = (b.rows() - DMatrix::<f64>::identity(9, 9)).abs().max();
            assert!(err < 1e-8, "err {err}");
        }
    }

    #[test]
    fn factor_reproduces_knot_correlation() {
        let knots = KnotGrid::linspace(-2.0, 2.0, 12).unwrap();
        for k in kernels() {
            let b = LowRankBasis::factor_only(&knots, &k).unwrap();
            let u = b.knot_chol_upper();
            let c = knot_correlation(&knots, &k);
            assert!((u.transpose() * &u - c).abs().max() <= 1e-8 + 1e-14);
        }
    }

    #[test]
    fn approximation_variance_bounded() {
        let knots = KnotGrid::linspace(-2.0, 2.0, 10).unwrap();
        for k in kernels() {
            let b = LowRankBasis::factor_only(&knots, &k).unwrap();
            let c = knot_correlation(&knots, &k);
            for x in [-2.7, -0.33, 0.0, 0.51, 1.99, 4.0] {
                let z = b.basis_row(x);
                assert!(z.iter().all(|v| v.is_finite()));
                let var = (z.transpose() * &c * &z)[0];
                assert!(var <= 1.0 + 1e-8, "var {var}");
            }
        }
    }

    #[test]
    fn far_rows_revert_to_prior() {
        let knots = KnotGrid::linspace(-1.0, 1.0, 8).unwrap();
        let k = CorrelationKernel::exponential(0.3).unwrap();
        let b = LowRankBasis::factor_only(&knots, &k).unwrap();
        let z = b.basis_row(1.0 + 20.0 * 0.3);
        assert!(z.norm() < 1e-6);
    }

    #[test]
    fn row_replacement_is_local() {
        let knots = KnotGrid::linspace(-2.0, 2.0, 7).unwrap();
        let k = CorrelationKernel::exponential(1.0).unwrap();
        let xs = [-1.3, 0.2, 0.9, 1.7];
        let mut b = LowRankBasis::build(&xs, &knots, &k).unwrap();
        let before = b.rows().clone();
        b.replace_row(2, -0.4);
        for i in [0, 1, 3] {
            assert_eq!(b.rows().row(i), before.row(i));
        }
        let fresh = LowRankBasis::build(&[-1.3, 0.2, -0.4, 1.7], &knots, &k).unwrap();
        assert!((fresh.rows() - b.rows()).abs().max() < 1e-14);
        assert_eq!(b.version(), 1);
    }

    #[test]
    fn single_row_cost_is_quadratic() {
        let k = CorrelationKernel::exponential(1.0).unwrap();
        for ell in [10usize, 20, 40] {
            let knots = KnotGrid::linspace(-2.0, 2.0, ell).unwrap();
            let mut b = LowRankBasis::build(&[0.0; 50], &knots, &k).unwrap();
            b.flops().reset();
            b.replace_row(3, 0.37);
            assert_eq!(b.flops().get(), (6 * ell * ell + 3 * ell) as u64);
        }
    }

    #[test]
    fn gram_is_psd() {
        let pts: Vec<f64> = (0..40)
            .map(|i| ((i * 37) % 23) as f64 * 0.17 - 2.0)
            .collect();
        for k in kernels() {
            let g = gram(&pts, &k);
            assert!(min_eigenvalue(&g) >= -1e-8);
        }
    }
}
