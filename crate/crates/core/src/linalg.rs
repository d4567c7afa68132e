//! Small dense helpers: counted triangular solves and jittered Cholesky.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Floating-point operation tally used to check complexity contracts.
#[derive(Debug, Default)]
pub struct FlopCounter(AtomicU64);

impl FlopCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for FlopCounter {
    fn clone(&self) -> Self {
        FlopCounter(AtomicU64::new(self.get()))
    }
}

/// Solves `L y = b` for lower-triangular `L` in place. Costs n² flops.
pub fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut [f64], flops: &FlopCounter) {
    let n = b.len();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
    flops.add((n * n) as u64);
}

/// Solves `Lᵀ x = b` for lower-triangular `L` in place. Costs n² flops.
pub fn solve_lower_transpose_in_place(l: &DMatrix<f64>, b: &mut [f64], flops: &FlopCounter) {
    let n = b.len();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
    flops.add((n * n) as u64);
}

/// Lower Cholesky factor of `a + jitter·I`.
pub fn cholesky_lower(a: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += jitter;
    }
    nalgebra::Cholesky::new(m)
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical(format!("{n}x{n} matrix is not positive definite")))
}

/// Log density of `N(v; 0, L Lᵀ)` given the lower factor `L`.
pub fn mvn_logpdf_lower(v: &DVector<f64>, l: &DMatrix<f64>, flops: &FlopCounter) -> f64 {
    let n = v.len();
    let mut y: Vec<f64> = v.iter().copied().collect();
    solve_lower_in_place(l, &mut y, flops);
    let quad: f64 = y.iter().map(|a| a * a).sum();
    let logdet: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    -0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// `Σ_i log N(m_i; 0, Rᵀ R)` over the rows `m_i` of `m`, for upper-triangular
/// `R` with positive diagonal.
pub fn mvn_logpdf_rows_upper(m: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let d = r.nrows();
    let logdet: f64 = (0..d).map(|j| r[(j, j)].ln()).sum();
    let mut y = vec![0.0; d];
    let mut quad = 0.0;
    for i in 0..m.nrows() {
        // forward solve Rᵀ y = m_i
        for j in 0..d {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= r[(k, j)] * y[k];
            }
            y[j] = s / r[(j, j)];
            quad += y[j] * y[j];
        }
    }
    let n = m.nrows() as f64;
    -0.5 * quad - n * logdet - 0.5 * n * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    nalgebra::SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
