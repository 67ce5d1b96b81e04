//! Datasets with per-cell missingness and their observed/missing index maps.
//!
//! Coordinates of a row are always ordered predictors first, then responses:
//! coordinate `j < p` is `x_j`, coordinate `p + k` is `y_k`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linalg::{Mat, Vector};
use crate::{Error, Result};

/// `n` rows of `p` predictors and `r` responses. Missing cells hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    x: Mat,
    y: Mat,
    x_names: Vec<String>,
    y_names: Vec<String>,
}

impl ObservedDataset {
    /// Builds a dataset where `NaN` marks a missing cell.
    ///
    /// Rejects infinite cells, columns that are entirely missing and rows that
    /// are entirely missing.
    pub fn from_nan_masked(x: Mat, y: Mat) -> Result<Self> {
        let x_names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let y_names = (1..=y.ncols()).map(|k| format!("y{k}")).collect();
        Self::with_names(x, y, x_names, y_names)
    }

    pub fn with_names(x: Mat, y: Mat, x_names: Vec<String>, y_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x_names.len() != x.ncols() || y_names.len() != y.ncols() {
            return Err(Error::ShapeMismatch("column names do not match column counts".into()));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidArgument("at least one response is required".into()));
        }
        if x.iter().chain(y.iter()).any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("dataset cell"));
        }
        let n = x.nrows();
        for (j, name) in x_names.iter().enumerate() {
            if n > 0 && x.column(j).iter().all(|v| v.is_nan()) {
                return Err(Error::AllMissingColumn(name.clone()));
            }
        }
        for (k, name) in y_names.iter().enumerate() {
            if n > 0 && y.column(k).iter().all(|v| v.is_nan()) {
                return Err(Error::AllMissingColumn(name.clone()));
            }
        }
        for i in 0..n {
            if x.row(i).iter().chain(y.row(i).iter()).all(|v| v.is_nan()) {
                return Err(Error::AllMissingRow(i));
            }
        }
        Ok(ObservedDataset { x, y, x_names, y_names })
    }

    /// Fully observed dataset; rejects any `NaN`.
    pub fn complete(x: Mat, y: Mat) -> Result<Self> {
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("complete dataset"));
        }
        Self::from_nan_masked(x, y)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn r(&self) -> usize {
        self.y.ncols()
    }
    pub fn x(&self) -> &Mat {
        &self.x
    }
    pub fn y(&self) -> &Mat {
        &self.y
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn y_names(&self) -> &[String] {
        &self.y_names
    }

    pub fn is_observed(&self, row: usize, coord: usize) -> bool {
        !self.value(row, coord).is_nan()
    }

    /// Cell value at a concatenated `(x, y)` coordinate; `NaN` when missing.
    pub fn value(&self, row: usize, coord: usize) -> f64 {
        let p = self.p();
        if coord < p {
            self.x[(row, coord)]
        } else {
            self.y[(row, coord - p)]
        }
    }

    /// The row as one `(x, y)` vector of length `p + r`.
    pub fn row_values(&self, row: usize) -> Vector {
        Vector::from_iterator(self.p() + self.r(), (0..self.p() + self.r()).map(|c| self.value(row, c)))
    }

    pub fn row_is_complete(&self, row: usize) -> bool {
        (0..self.p() + self.r()).all(|c| self.is_observed(row, c))
    }

    pub fn is_complete(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| !v.is_nan())
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.row_is_complete(i)).collect()
    }

    /// Fraction of missing cells per predictor and per response column.
    pub fn missing_rates(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n().max(1) as f64;
        let rate = |m: &Mat, j: usize| m.column(j).iter().filter(|v| v.is_nan()).count() as f64 / n;
        (
            (0..self.p()).map(|j| rate(&self.x, j)).collect(),
            (0..self.r()).map(|k| rate(&self.y, k)).collect(),
        )
    }

    /// New dataset from the listed rows, repeats allowed (bootstrap resamples).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = Mat::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = Mat::from_fn(rows.len(), self.r(), |i, k| self.y[(rows[i], k)]);
        Self::with_names(x, y, self.x_names.clone(), self.y_names.clone())
    }

    pub fn pattern_of(&self, row: usize) -> MissPattern {
        let d = self.p() + self.r();
        let (obs, mis): (Vec<usize>, Vec<usize>) = (0..d).partition(|&c| self.is_observed(row, c));
        MissPattern { obs_idx: obs, mis_idx: mis }
    }

    /// Groups rows by missingness pattern, patterns in order of first occurrence.
    pub fn group_patterns(&self) -> PatternTable {
        let mut groups: Vec<PatternGroup> = Vec::new();
        for i in 0..self.n() {
            let pat = self.pattern_of(i);
            match groups.iter_mut().find(|g| g.pattern == pat) {
                Some(g) => g.rows.push(i),
                None => groups.push(PatternGroup { pattern: pat, rows: alloc::vec![i] }),
            }
        }
        PatternTable { groups }
    }
}

/// Observed and missing coordinates of one row, each in increasing order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MissPattern {
    pub obs_idx: Vec<usize>,
    pub mis_idx: Vec<usize>,
}

impl MissPattern {
    pub fn dim(&self) -> usize {
        self.obs_idx.len() + self.mis_idx.len()
    }

    pub fn is_complete(&self) -> bool {
        self.mis_idx.is_empty()
    }

    /// Splits a full row into its observed and missing parts.
    pub fn gather(&self, row: &Vector) -> (Vector, Vector) {
        let pick = |idx: &[usize]| Vector::from_iterator(idx.len(), idx.iter().map(|&c| row[c]));
        (pick(&self.obs_idx), pick(&self.mis_idx))
    }

    /// Inverse of [`gather`](Self::gather).
    pub fn scatter(&self, obs: &Vector, mis: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim());
        for (k, &c) in self.obs_idx.iter().enumerate() {
            out[c] = obs[k];
        }
        for (k, &c) in self.mis_idx.iter().enumerate() {
            out[c] = mis[k];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternGroup {
    pub pattern: MissPattern,
    pub rows: Vec<usize>,
}

/// Partition of the rows by missingness pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTable {
    pub groups: Vec<PatternGroup>,
}

impl PatternTable {
    pub fn len(&self) -> usize {
        self.groups.len()
    }
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_masked(seed: u64, n: usize, p: usize, r: usize, miss: f64) -> Option<ObservedDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(miss) {
                f64::NAN
            } else {
                rng.random_range(-5.0..5.0)
            }
        };
        let x = Mat::from_fn(n, p, |_, _| cell(&mut rng));
        let y = Mat::from_fn(n, r, |_, _| cell(&mut rng));
        ObservedDataset::from_nan_masked(x, y).ok()
    }

    #[test]
    fn fully_observed_row_has_no_missing_coords() {
        let ds = ObservedDataset::complete(Mat::from_element(2, 2, 1.0), Mat::from_element(2, 3, 2.0)).unwrap();
        assert!(ds.pattern_of(0).mis_idx.is_empty());
        assert_eq!(ds.group_patterns().len(), 1);
        assert_eq!(ds.group_patterns().groups[0].rows, alloc::vec![0, 1]);
    }

    #[test]
    fn x1_and_y3_missing() {
        let x = Mat::from_row_slice(2, 2, &[f64::NAN, 1.0, 2.0, 3.0]);
        let y = Mat::from_row_slice(2, 3, &[1.0, 2.0, f64::NAN, 1.0, 1.0, 1.0]);
        let ds = ObservedDataset::from_nan_masked(x, y).unwrap();
        assert_eq!(ds.pattern_of(0).mis_idx, alloc::vec![0, 4]);
        assert_eq!(ds.pattern_of(0).obs_idx, alloc::vec![1, 2, 3]);
    }

    #[test]
    fn alternating_masks_make_two_patterns() {
        let x = Mat::from_fn(10, 1, |i, _| if i % 2 == 0 { f64::NAN } else { 1.0 });
        let y = Mat::from_element(10, 2, 0.5);
        let ds = ObservedDataset::from_nan_masked(x, y).unwrap();
        let t = ds.group_patterns();
        assert_eq!(t.len(), 2);
        assert!(t.groups.iter().all(|g| g.rows.len() == 5));
        assert_eq!(t.groups[0].rows[0], 0);
    }

    #[test]
    fn rejects_all_missing_column_and_row() {
        let x = Mat::from_element(3, 1, f64::NAN);
        let y = Mat::from_element(3, 2, 1.0);
        assert_eq!(
            ObservedDataset::from_nan_masked(x, y),
            Err(Error::AllMissingColumn("x1".into()))
        );
        let x = Mat::from_row_slice(2, 1, &[f64::NAN, 1.0]);
        let y = Mat::from_row_slice(2, 2, &[f64::NAN, f64::NAN, 1.0, 2.0]);
        assert_eq!(ObservedDataset::from_nan_masked(x, y), Err(Error::AllMissingRow(0)));
    }

    proptest! {
        #[test]
        fn gather_scatter_roundtrip(seed in any::<u64>()) {
            if let Some(ds) = random_masked(seed, 12, 2, 3, 0.3) {
                for i in 0..ds.n() {
                    let row = ds.row_values(i);
                    let pat = ds.pattern_of(i);
                    let (o, m) = pat.gather(&row);
                    let back = pat.scatter(&o, &m);
                    for c in 0..row.len() {
                        prop_assert!(back[c].to_bits() == row[c].to_bits());
                    }
                    prop_assert!(o.iter().all(|v| !v.is_nan()));
                    prop_assert!(m.iter().all(|v| v.is_nan()));
                }
            }
        }

        #[test]
        fn group_patterns_partitions_rows(seed in any::<u64>()) {
            if let Some(ds) = random_masked(seed, 40, 2, 3, 0.25) {
                let t = ds.group_patterns();
                let mut seen = alloc::vec![0usize; ds.n()];
                for g in &t.groups {
                    for &i in &g.rows {
                        seen[i] += 1;
                        prop_assert_eq!(&ds.pattern_of(i), &g.pattern);
                    }
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
                prop_assert_eq!(t.groups.iter().map(|g| g.rows.len()).sum::<usize>(), ds.n());
            }
        }
    }
}
