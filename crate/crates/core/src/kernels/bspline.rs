use nalgebra::{DMatrix, DVector};

use super::basis::KnotGrid;
use crate::error::{Error, Result};

/// Clamped B-spline basis whose breakpoints are the knot grid.
///
/// With `ℓ` breakpoints and degree `p` there are `ℓ + p − 1` basis functions.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    knots: KnotGrid,
    degree: usize,
    knot_vector: Vec<f64>,
    rows: DMatrix<f64>,
    version: u64,
}

const SPAN_TOL: f64 = 1e-12;

impl SplineBasis {
    pub fn new(knots: &KnotGrid, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::invalid_arg("B-spline degree must be at least 1"));
        }
        let loc = knots.locations();
        let mut t = vec![loc[0]; degree];
        t.extend_from_slice(loc);
        t.extend(std::iter::repeat_n(loc[loc.len() - 1], degree));
        let n = loc.len() + degree - 1;
        Ok(Self {
            knots: knots.clone(),
            degree,
            knot_vector: t,
            rows: DMatrix::zeros(0, n),
            version: 0,
        })
    }

    pub fn build(x_all: &[f64], knots: &KnotGrid, degree: usize) -> Result<Self> {
        let mut b = Self::new(knots, degree)?;
        let mut rows = DMatrix::zeros(x_all.len(), b.n_basis());
        for (i, &x) in x_all.iter().enumerate() {
            rows.set_row(i, &b.basis_row(x)?.transpose());
        }
        b.rows = rows;
        Ok(b)
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() + self.degree - 1
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &KnotGrid {
        &self.knots
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.knots.lower() - SPAN_TOL && x <= self.knots.upper() + SPAN_TOL
    }

    pub fn replace_row(&mut self, i: usize, x: f64) -> Result<()> {
        let z = self.basis_row(x)?;
        self.rows.set_row(i, &z.transpose());
        self.version += 1;
        Ok(())
    }

    /// Design row at `x` by the Cox–de Boor recursion.
    pub fn basis_row(&self, x: f64) -> Result<DVector<f64>> {
        if !self.contains(x) {
            return Err(Error::invalid_arg(format!(
                "x = {x} outside spline span [{}, {}]",
                self.knots.lower(),
                self.knots.upper()
            )));
        }
        let p = self.degree;
        let t = &self.knot_vector;
        let x = x.clamp(self.knots.lower(), self.knots.upper());
        let n = self.n_basis();
        // span s with t[s] <= x < t[s+1], restricted to p..=n-1
        let mut s = p;
        while s < n - 1 && x >= t[s + 1] {
            s += 1;
        }
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let tmp = if denom > 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        let mut row = DVector::zeros(n);
        for (r, v) in vals.into_iter().enumerate() {
            row[s - p + r] = v;
        }
        Ok(row)
    }
}

/// Design matrix for all rows.
pub fn bspline_basis(x_all: &[f64], knots: &KnotGrid, degree: usize) -> Result<DMatrix<f64>> {
    Ok(SplineBasis::build(x_all, knots, degree)?.rows.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hat_at_interior_knot() {
        let knots = KnotGrid::linspace(0.0, 4.0, 5).unwrap();
        let b = SplineBasis::new(&knots, 1).unwrap();
        let row = b.basis_row(2.0).unwrap();
        assert_eq!(row.len(), 5);
        assert!((row[2] - 1.0).abs() < 1e-15);
        assert!((row.sum() - 1.0).abs() < 1e-15);
        let end = b.basis_row(4.0).unwrap();
        assert!((end[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cubic_partition_of_unity() {
        let knots = KnotGrid::linspace(-3.0, 3.0, 11).unwrap();
        let b = SplineBasis::new(&knots, 3).unwrap();
        for i in 0..=600 {
            let x = -3.0 + i as f64 * 0.01;
            let row = b.basis_row(x).unwrap();
            assert!(row.iter().all(|&v| v >= -1e-15));
            assert!((row.sum() - 1.0).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn outside_span_is_error() {
        let knots = KnotGrid::linspace(-1.0, 1.0, 5).unwrap();
        let b = SplineBasis::new(&knots, 3).unwrap();
        assert!(b.basis_row(1.2).is_err());
        assert!(SplineBasis::new(&knots, 0).is_err());
    }

    #[test]
    fn cubic_columns_are_smooth() {
        // Second differences on a fine grid stay O(h²): no kinks.
        let knots = KnotGrid::linspace(0.0, 1.0, 6).unwrap();
        let b = SplineBasis::new(&knots, 3).unwrap();
        let h = 1e-3;
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 * h).collect();
        let m = bspline_basis(&grid, &knots, 3).unwrap();
        for c in 0..b.n_basis() {
            let col = m.column(c);
            let d1: Vec<f64> = (1..grid.len()).map(|i| col[i] - col[i - 1]).collect();
            let d2: Vec<f64> = (1..d1.len()).map(|i| d1[i] - d1[i - 1]).collect();
            let d3: Vec<f64> = (1..d2.len()).map(|i| d2[i] - d2[i - 1]).collect();
            // first and second derivative bounded, third difference O(h³·max|f'''|)
            assert!(d1.iter().all(|v| v.abs() < 20.0 * h));
            assert!(d2.iter().all(|v| v.abs() < 500.0 * h * h));
            assert!(d3.iter().all(|v| v.abs() < 2e4 * h * h * h));
        }
    }
}
