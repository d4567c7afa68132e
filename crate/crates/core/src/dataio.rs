//! Dataset ingestion, validation, covariate standardization, and fold design.
//!
//! The counts file is a CSV whose header holds species names and whose body
//! holds one row of exact non-negative integer counts per observation. The
//! covariates file has columns `row_id,value`, where `row_id` is the zero-based
//! index of the matching body row in the counts file and an empty `value`
//! marks a reconstruction row whose covariate is unknown.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N×d matrix of species counts with cached row totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionMatrix {
    counts: Vec<u32>,
    n_rows: usize,
    species_names: Vec<String>,
    row_totals: Vec<u32>,
}

impl CompositionMatrix {
    /// Builds a validated matrix from row vectors.
    pub fn new(rows: Vec<Vec<u32>>, species_names: Vec<String>) -> Result<Self> {
        let d = species_names.len();
        if d < 2 {
            return Err(Error::invalid_data(format!(
                "need at least two species, got {d}"
            )));
        }
        let mut seen = HashSet::new();
        for name in &species_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid_data(format!(
                    "duplicate species name '{name}'"
                )));
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid_data("no observations"));
        }
        let mut counts = Vec::with_capacity(rows.len() * d);
        let mut row_totals = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::invalid_data(format!(
                    "row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            let total: u64 = row.iter().map(|&c| c as u64).sum();
            if total == 0 {
                return Err(Error::invalid_data(format!("row {i} has zero total count")));
            }
            let total = u32::try_from(total)
                .map_err(|_| Error::invalid_data(format!("row {i} total overflows u32")))?;
            counts.extend_from_slice(row);
            row_totals.push(total);
        }
        Ok(Self {
            counts,
            n_rows: rows.len(),
            species_names,
            row_totals,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_species(&self) -> usize {
        self.species_names.len()
    }

    pub fn species_names(&self) -> &[String] {
        &self.species_names
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let d = self.n_species();
        &self.counts[i * d..(i + 1) * d]
    }

    pub fn row_total(&self, i: usize) -> u32 {
        self.row_totals[i]
    }

    pub fn row_totals(&self) -> &[u32] {
        &self.row_totals
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.counts.chunks(self.n_species())
    }

    /// Row-normalized proportions.
    pub fn proportions(&self) -> Vec<Vec<f64>> {
        self.rows()
            .zip(&self.row_totals)
            .map(|(r, &m)| r.iter().map(|&c| c as f64 / m as f64).collect())
            .collect()
    }

    /// Column totals over all rows.
    pub fn species_totals(&self) -> Vec<u64> {
        let mut t = vec![0u64; self.n_species()];
        for r in self.rows() {
            for (acc, &c) in t.iter_mut().zip(r) {
                *acc += c as u64;
            }
        }
        t
    }

    /// New matrix holding the given rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows = idx.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::new(rows, self.species_names.clone())
    }

    /// Canonical CSV rendering (header, then one integer row per line).
    pub fn to_csv_string(&self) -> String {
        let mut out = self.species_names.join(",");
        out.push('\n');
        for r in self.rows() {
            let line: Vec<String> = r.iter().map(|c| c.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Center/scale pair mapping original units to the working scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn to_working(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn to_original(&self, v: f64) -> f64 {
        v * self.scale + self.center
    }
}

/// Observed covariates for calibration rows and the indices of
/// reconstruction rows whose covariates are unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSet {
    observed: Vec<(usize, f64)>,
    missing: Vec<usize>,
    standardization: Option<Standardization>,
}

impl CovariateSet {
    /// Validates that observed and missing indices partition `0..n_rows`.
    pub fn new(observed: Vec<(usize, f64)>, missing: Vec<usize>, n_rows: usize) -> Result<Self> {
        let mut covered = vec![false; n_rows];
        for &(i, v) in &observed {
            if !v.is_finite() {
                return Err(Error::invalid_data(format!(
                    "covariate for row {i} is not finite"
                )));
            }
            mark(&mut covered, i)?;
        }
        for &i in &missing {
            mark(&mut covered, i)?;
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::invalid_data(format!(
                "row {i} has no covariate entry"
            )));
        }
        let mut observed = observed;
        observed.sort_by_key(|&(i, _)| i);
        let mut missing = missing;
        missing.sort_unstable();
        Ok(Self {
            observed,
            missing,
            standardization: None,
        })
    }

    /// All rows observed, in row order.
    pub fn fully_observed(values: &[f64]) -> Result<Self> {
        Self::new(
            values.iter().copied().enumerate().collect(),
            vec![],
            values.len(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.observed.len() + self.missing.len()
    }

    pub fn observed(&self) -> &[(usize, f64)] {
        &self.observed
    }

    pub fn observed_values(&self) -> Vec<f64> {
        self.observed.iter().map(|&(_, v)| v).collect()
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        self.observed.iter().map(|&(i, _)| i).collect()
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn standardization(&self) -> Option<Standardization> {
        self.standardization
    }

    /// Covariate of `row` if observed.
    pub fn value_of(&self, row: usize) -> Option<f64> {
        self.observed
            .binary_search_by_key(&row, |&(i, _)| i)
            .ok()
            .map(|k| self.observed[k].1)
    }

    /// Maps a working-scale value back to original units.
    pub fn to_original(&self, v: f64) -> f64 {
        self.standardization.map_or(v, |s| s.to_original(v))
    }

    /// Maps an original-unit value to the working scale.
    pub fn to_working(&self, v: f64) -> f64 {
        self.standardization.map_or(v, |s| s.to_working(v))
    }

    /// Inverse of [`standardize_covariates`]: values in original units, no
    /// standardization recorded.
    pub fn unstandardize(&self) -> CovariateSet {
        let observed = self
            .observed
            .iter()
            .map(|&(i, v)| (i, self.to_original(v)))
            .collect();
        CovariateSet {
            observed,
            missing: self.missing.clone(),
            standardization: None,
        }
    }

    /// Same rows with every covariate of `rows` hidden.
    pub fn mask(&self, rows: &[usize]) -> CovariateSet {
        let hide: HashSet<usize> = rows.iter().copied().collect();
        let observed = self
            .observed
            .iter()
            .copied()
            .filter(|(i, _)| !hide.contains(i))
            .collect();
        let mut missing: Vec<usize> = self
            .missing
            .iter()
            .copied()
            .chain(rows.iter().copied())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        CovariateSet {
            observed,
            missing,
            standardization: self.standardization,
        }
    }

    /// Canonical CSV rendering, rows in `row_id` order.
    pub fn to_csv_string(&self) -> String {
        let mut entries: Vec<(usize, Option<f64>)> = self
            .observed
            .iter()
            .map(|&(i, v)| (i, Some(v)))
            .chain(self.missing.iter().map(|&i| (i, None)))
            .collect();
        entries.sort_by_key(|e| e.0);
        let mut out = String::from("row_id,value\n");
        for (i, v) in entries {
            match v {
                Some(v) => writeln!(out, "{i},{v}").unwrap(),
                None => writeln!(out, "{i},").unwrap(),
            }
        }
        out
    }
}

fn mark(covered: &mut [bool], i: usize) -> Result<()> {
    match covered.get_mut(i) {
        None => Err(Error::invalid_data(format!(
            "row_id {i} out of range for {} rows",
            covered.len()
        ))),
        Some(true) => Err(Error::invalid_data(format!("row_id {i} listed twice"))),
        Some(c) => {
            *c = true;
            Ok(())
        }
    }
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &str, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        column,
        message: message.into(),
    }
}

/// Parses a counts CSV held in memory. `origin` labels error messages.
pub fn parse_counts(text: &str, origin: &str) -> Result<CompositionMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(origin, 1, 1, e.to_string()))?
        .clone();
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let d = names.len();
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(origin, line, 1, e.to_string()))?;
        if record.len() != d {
            return Err(parse_err(
                origin,
                line,
                record.len().min(d) + 1,
                format!("expected {d} fields, found {}", record.len()),
            ));
        }
        let mut row = Vec::with_capacity(d);
        for (j, field) in record.iter().enumerate() {
            let v: i64 = field.parse().map_err(|_| {
                parse_err(
                    origin,
                    line,
                    j + 1,
                    format!("'{field}' is not an integer count"),
                )
            })?;
            if v < 0 {
                return Err(parse_err(
                    origin,
                    line,
                    j + 1,
                    format!("negative count {v}"),
                ));
            }
            let v = u32::try_from(v)
                .map_err(|_| parse_err(origin, line, j + 1, format!("count {v} too large")))?;
            row.push(v);
        }
        if row.iter().all(|&c| c == 0) {
            return Err(parse_err(origin, line, 1, "row has zero total count"));
        }
        rows.push(row);
    }
    CompositionMatrix::new(rows, names).map_err(|e| parse_err(origin, 1, 1, e.to_string()))
}

/// Parses a covariates CSV for a counts matrix with `n_rows` rows.
pub fn parse_covariates(text: &str, origin: &str, n_rows: usize) -> Result<CovariateSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(origin, 1, 1, e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "row_id" || &header[1] != "value" {
        return Err(parse_err(origin, 1, 1, "header must be 'row_id,value'"));
    }
    let mut observed = Vec::new();
    let mut missing = Vec::new();
    let mut count = 0usize;
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(origin, line, 1, e.to_string()))?;
        if record.len() != 2 {
            return Err(parse_err(origin, line, 1, "expected 2 fields"));
        }
        let id: usize = record[0]
            .parse()
            .map_err(|_| parse_err(origin, line, 1, format!("bad row_id '{}'", &record[0])))?;
        if id >= n_rows {
            return Err(parse_err(
                origin,
                line,
                1,
                format!("row_id {id} has no matching counts row ({n_rows} rows)"),
            ));
        }
        if record[1].is_empty() {
            missing.push(id);
        } else {
            let v: f64 = record[1]
                .parse()
                .map_err(|_| parse_err(origin, line, 2, format!("bad value '{}'", &record[1])))?;
            if !v.is_finite() {
                return Err(parse_err(origin, line, 2, "value is not finite"));
            }
            observed.push((id, v));
        }
        count += 1;
    }
    if count != n_rows {
        return Err(parse_err(
            origin,
            count + 1,
            1,
            format!("{count} covariate rows for {n_rows} count rows"),
        ));
    }
    CovariateSet::new(observed, missing, n_rows).map_err(|e| parse_err(origin, 1, 1, e.to_string()))
}

/// Loads and cross-validates a counts file and its covariate file.
pub fn load_dataset(
    counts_path: impl AsRef<Path>,
    covariates_path: impl AsRef<Path>,
) -> Result<(CompositionMatrix, CovariateSet)> {
    let cp = counts_path.as_ref();
    let xp = covariates_path.as_ref();
    let counts = parse_counts(&read_file(cp)?, &cp.display().to_string())?;
    let cs = parse_covariates(&read_file(xp)?, &xp.display().to_string(), counts.n_rows())?;
    Ok((counts, cs))
}

/// Sample mean and sample standard deviation (n − 1 denominator).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Rescales observed covariates to sample mean 0 and sd 1, composing with
/// any standardization already recorded.
pub fn standardize_covariates(cs: &CovariateSet) -> Result<CovariateSet> {
    let values = cs.observed_values();
    let distinct = values
        .iter()
        .any(|&v| values.first().is_some_and(|&f| v != f));
    if values.len() < 2 || !distinct {
        return Err(Error::invalid_data(
            "standardization needs at least two distinct observed covariates",
        ));
    }
    let (center, scale) = mean_sd(&values);
    let observed = cs
        .observed
        .iter()
        .map(|&(i, v)| (i, (v - center) / scale))
        .collect();
    let prior = cs.standardization.unwrap_or_else(Standardization::identity);
    Ok(CovariateSet {
        observed,
        missing: cs.missing.clone(),
        standardization: Some(Standardization {
            center: prior.center + prior.scale * center,
            scale: prior.scale * scale,
        }),
    })
}

/// Random assignment of rows to `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDesign {
    /// Fold id in `1..=k` for each row.
    pub assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldDesign {
    pub fn n_rows(&self) -> usize {
        self.assignments.len()
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f - 1] += 1;
        }
        sizes
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("row_id,fold\n");
        for (i, f) in self.assignments.iter().enumerate() {
            writeln!(out, "{i},{f}").unwrap();
        }
        out
    }
}

pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldDesign> {
    if k < 2 || k > n {
        return Err(Error::invalid_arg(format!(
            "fold count {k} must satisfy 2 <= k <= {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut assignments = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        assignments[row] = pos % k + 1;
    }
    Ok(FoldDesign {
        assignments,
        k,
        seed,
    })
}

/// Train/test split where the test rows lie above a covariate quantile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoWaySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub threshold: f64,
}

/// Linear-interpolation sample quantile (the usual "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn noanalog_split(cs: &CovariateSet, q: f64) -> Result<TwoWaySplit> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid_arg(format!("quantile {q} not in (0, 1)")));
    }
    if !cs.missing().is_empty() {
        return Err(Error::invalid_data(
            "no-analog split needs covariates observed for every row",
        ));
    }
    let values = cs.observed_values();
    let threshold = quantile(&values, q);
    let (test, train): (Vec<_>, Vec<_>) = cs.observed().iter().partition(|&&(_, v)| v > threshold);
    if test.is_empty() || train.is_empty() {
        return Err(Error::invalid_data(format!(
            "degenerate no-analog split at quantile {q}: {} train, {} test",
            train.len(),
            test.len()
        )));
    }
    Ok(TwoWaySplit {
        train: train.iter().map(|&(i, _)| i).collect(),
        test: test.iter().map(|&(i, _)| i).collect(),
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_counts_file() {
        let m = parse_counts("a,b\n1,0\n2,3\n0,4\n", "mem").unwrap();
        assert_eq!(m.row_totals(), &[1, 5, 4]);
        assert_eq!(m.n_species(), 2);
    }

    #[test]
    fn negative_count_names_cell() {
        let err = parse_counts("a,b\n1,0\n2,-1\n", "mem").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (3, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn decimal_count_rejected() {
        assert!(parse_counts("a,b\n3.0,1\n", "mem").is_err());
    }

    #[test]
    fn zero_row_rejected() {
        let err = parse_counts("a,b\n1,2\n0,0\n", "mem").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn ragged_row_rejected() {
        assert!(parse_counts("a,b\n1,2,3\n", "mem").is_err());
    }

    #[test]
    fn empty_value_is_missing() {
        let cs = parse_covariates("row_id,value\n0,1.5\n1,\n2,3\n", "mem", 3).unwrap();
        assert_eq!(cs.missing(), &[1]);
        assert_eq!(cs.value_of(2), Some(3.0));
    }

    #[test]
    fn covariate_row_count_mismatch() {
        assert!(parse_covariates("row_id,value\n0,1.5\n", "mem", 2).is_err());
        assert!(parse_covariates("row_id,value\n0,1\n0,2\n", "mem", 2).is_err());
    }

    #[test]
    fn standardize_two_points() {
        let cs = CovariateSet::fully_observed(&[1.0, 3.0]).unwrap();
        let s = standardize_covariates(&cs).unwrap();
        let v = s.observed_values();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0] + h).abs() < 1e-12 && (v[1] - h).abs() < 1e-12);
        let back = s.unstandardize();
        assert!((back.observed_values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_idempotent() {
        let cs = CovariateSet::fully_observed(&[2.0, 5.0, 7.5, 11.0]).unwrap();
        let once = standardize_covariates(&cs).unwrap();
        let twice = standardize_covariates(&once).unwrap();
        for (a, b) in once.observed_values().iter().zip(twice.observed_values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = twice.unstandardize().observed_values();
        for (a, b) in back.iter().zip(cs.observed_values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_needs_distinct_values() {
        let cs = CovariateSet::fully_observed(&[2.0, 2.0, 2.0]).unwrap();
        assert!(standardize_covariates(&cs).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let f = kfold_split(12, 12, 1).unwrap();
        assert!(f.fold_sizes().iter().all(|&s| s == 1));
        let f = kfold_split(13, 12, 1).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort();
        assert_eq!(sizes[..11], [1; 11]);
        assert_eq!(sizes[11], 2);
        assert_eq!(kfold_split(13, 12, 1).unwrap(), f);
        assert!(kfold_split(5, 1, 0).is_err());
        assert!(kfold_split(5, 6, 0).is_err());
    }

    #[test]
    fn noanalog_takes_upper_tail() {
        let vals: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let cs = CovariateSet::fully_observed(&vals).unwrap();
        let s = noanalog_split(&cs, 0.9).unwrap();
        assert_eq!(s.test.len(), 10);
        assert!(s.test.iter().all(|&i| vals[i] > 90.0));
        let s = noanalog_split(&cs, 0.5).unwrap();
        assert_eq!(s.test.len(), 50);
        let flat = CovariateSet::fully_observed(&[4.0; 10]).unwrap();
        assert!(noanalog_split(&flat, 0.5).is_err());
    }
}
