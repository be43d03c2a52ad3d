//! Observed data `(W, A, Y)`, CSV ingestion and treatment-stratified fold splits.
//!
//! All randomness in the crate comes from ChaCha8 streams seeded with a `u64`
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`), so splits and simulated data are
//! identical across platforms.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HalError, Result};

/// Covariates `w` (n x d), binary treatment `a` and real outcome `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: Array2<f64>,
    a: Vec<u8>,
    y: Vec<f64>,
    names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(w: Array2<f64>, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let n = w.nrows();
        if n == 0 {
            return Err(HalError::InvalidArgument("dataset must have at least one row".into()));
        }
        if a.len() != n {
            return Err(HalError::DimensionMismatch { expected: n, found: a.len() });
        }
        if y.len() != n {
            return Err(HalError::DimensionMismatch { expected: n, found: y.len() });
        }
        if let Some(i) = a.iter().position(|&ai| ai > 1) {
            return Err(HalError::BadCell {
                row: i + 1,
                column: "a".into(),
                message: format!("treatment must be 0 or 1, found {}", a[i]),
            });
        }
        for ((i, j), v) in w.indexed_iter() {
            if !v.is_finite() {
                return Err(HalError::BadCell {
                    row: i + 1,
                    column: format!("w{}", j + 1),
                    message: "non-finite value".into(),
                });
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(HalError::BadCell {
                row: i + 1,
                column: "y".into(),
                message: "non-finite value".into(),
            });
        }
        Ok(Self { w, a, y, names: None })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(HalError::DimensionMismatch { expected: self.d(), found: names.len() });
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.w.row(i)
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn treated_count(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1).count()
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            w: self.w.select(Axis(0), idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            names: self.names.clone(),
        }
    }

    /// The same units with the treatment label flipped, so arm 0 can be
    /// estimated with the arm-1 machinery.
    pub fn flipped(&self) -> Dataset {
        Dataset {
            w: self.w.clone(),
            a: self.a.iter().map(|&v| 1 - v).collect(),
            y: self.y.clone(),
            names: self.names.clone(),
        }
    }

    /// Writes `names..., a, y` with shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path, a_col: &str, y_col: &str) -> Result<()> {
        let file = File::create(path).map_err(|source| HalError::Io { path: path.into(), source })?;
        let mut out = csv::Writer::from_writer(file);
        let names: Vec<String> = match &self.names {
            Some(n) => n.clone(),
            None => (1..=self.d()).map(|j| format!("w{j}")).collect(),
        };
        let mut header = names;
        header.push(a_col.to_string());
        header.push(y_col.to_string());
        out.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.w.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.a[i].to_string());
            rec.push(format!("{:?}", self.y[i]));
            out.write_record(&rec)?;
        }
        let mut inner = out.into_inner().map_err(|e| HalError::Io {
            path: path.into(),
            source: e.into_error(),
        })?;
        inner.flush().map_err(|source| HalError::Io { path: path.into(), source })?;
        Ok(())
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|source| HalError::Io { path: path.into(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Trimmed header names of a CSV file.
pub fn csv_header(path: &Path) -> Result<Vec<String>> {
    Ok(open_csv(path)?.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Reads the named numeric columns; returns one row-major vector per data row.
/// Row numbers in errors count data rows from 1 (the header is not counted).
fn read_columns(path: &Path, cols: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut reader = open_csv(path)?;
    let header = reader.headers()?.clone();
    let idx: Vec<usize> = cols
        .iter()
        .map(|&name| {
            header.iter().position(|h| h.trim() == name).ok_or_else(|| HalError::MissingColumn(name.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let values = idx
            .iter()
            .zip(cols)
            .map(|(&i, &name)| {
                let raw = record.get(i).unwrap_or("").trim();
                let bad = |message: String| HalError::BadCell { row, column: name.into(), message };
                if raw.is_empty() {
                    return Err(bad("missing value".into()));
                }
                let v: f64 = raw.parse().map_err(|_| bad(format!("not a number: `{raw}`")))?;
                if !v.is_finite() {
                    return Err(bad("non-finite value".into()));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(HalError::EmptyBody);
    }
    Ok(rows)
}

/// Reads a headered, comma-separated file into a dataset.
pub fn load_csv(path: &Path, w_cols: &[String], a_col: &str, y_col: &str) -> Result<Dataset> {
    let mut cols: Vec<&str> = w_cols.iter().map(String::as_str).collect();
    cols.push(a_col);
    cols.push(y_col);
    let rows = read_columns(path, &cols)?;
    let d = w_cols.len();
    let n = rows.len();
    let mut w = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (r, row) in rows.iter().enumerate() {
        w.extend_from_slice(&row[..d]);
        a.push(match row[d] {
            v if v == 0.0 => 0u8,
            v if v == 1.0 => 1u8,
            v => {
                return Err(HalError::BadCell {
                    row: r + 1,
                    column: a_col.into(),
                    message: format!("treatment must be 0 or 1, found {v}"),
                })
            }
        });
        y.push(row[d + 1]);
    }
    let w = Array2::from_shape_vec((n, d), w).expect("row-major shape");
    Dataset::new(w, a, y)?.with_names(w_cols.to_vec())
}

/// Reads covariate columns only.
pub fn load_covariates(path: &Path, w_cols: &[String]) -> Result<Array2<f64>> {
    let cols: Vec<&str> = w_cols.iter().map(String::as_str).collect();
    let rows = read_columns(path, &cols)?;
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, w_cols.len()), rows.concat()).expect("row-major shape"))
}

/// Validation-fold membership for V-fold cross-fitting. Folds are 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    v: usize,
    seed: u64,
}

impl FoldAssignment {
    /// Builds an assignment from explicit labels; every fold must be nonempty.
    pub fn from_labels(fold_of: Vec<usize>, v: usize, seed: u64) -> Result<Self> {
        if v < 2 {
            return Err(HalError::InvalidArgument(format!("need at least 2 folds, got {v}")));
        }
        let mut sizes = vec![0usize; v];
        for &f in &fold_of {
            if f >= v {
                return Err(HalError::InvalidArgument(format!("fold label {f} out of range for {v} folds")));
            }
            sizes[f] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(HalError::InvalidArgument(format!("fold {empty} is empty")));
        }
        Ok(Self { fold_of, v, seed })
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Stratified V-fold split: each treatment stratum is shuffled and dealt
/// round-robin, the deal continuing across strata so overall fold sizes also
/// differ by at most one.
pub fn make_folds(dataset: &Dataset, v: usize, seed: u64) -> Result<FoldAssignment> {
    if v < 2 {
        return Err(HalError::InvalidArgument(format!("need at least 2 folds, got {v}")));
    }
    let treated = dataset.treated_count();
    let control = dataset.n() - treated;
    if treated < v || control < v {
        return Err(HalError::InvalidArgument(format!(
            "each treatment stratum needs at least {v} units (treated {treated}, control {control})"
        )));
    }
    stratified_folds(dataset.a(), v, seed)
}

/// Stratified split over arbitrary small-integer labels; empty strata are skipped.
pub(crate) fn stratified_folds(labels: &[u8], v: usize, seed: u64) -> Result<FoldAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut next = 0usize;
    for stratum in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == stratum).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold_of[i] = next % v;
            next += 1;
        }
    }
    FoldAssignment::from_labels(fold_of, v, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn cols(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn loads_three_rows() {
        let f = write_file("w1,w2,a,y\n0.1,2,1,3.5\n0.2,1e-3,0,-1\n-4,5,1,0\n");
        let ds = load_csv(f.path(), &cols(&["w1", "w2"]), "a", "y").unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.a(), &[1, 0, 1]);
        assert_eq!(ds.w()[[1, 1]], 1e-3);
        assert_eq!(ds.y()[1], -1.0);
    }

    #[test]
    fn bad_treatment_names_row_and_column() {
        let f = write_file("w1,a,y\n1,0,1\n1,1,1\n1,0,1\n1,1,1\n1,2,1\n");
        let err = load_csv(f.path(), &cols(&["w1"]), "a", "y").unwrap_err();
        match err {
            HalError::BadCell { row, column, .. } => {
                assert_eq!(row, 5);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_cells() {
        let f = write_file("w1,a,y\n1,0,1\n");
        assert!(matches!(
            load_csv(f.path(), &cols(&["w9"]), "a", "y"),
            Err(HalError::MissingColumn(c)) if c == "w9"
        ));
        let f = write_file("w1,a,y\n1,0,\n");
        assert!(matches!(load_csv(f.path(), &cols(&["w1"]), "a", "y"), Err(HalError::BadCell { row: 1, .. })));
        let f = write_file("w1,a,y\nabc,0,1\n");
        assert!(matches!(load_csv(f.path(), &cols(&["w1"]), "a", "y"), Err(HalError::BadCell { .. })));
        let f = write_file("w1,a,y\n");
        assert!(matches!(load_csv(f.path(), &cols(&["w1"]), "a", "y"), Err(HalError::EmptyBody)));
        assert!(matches!(
            load_csv(Path::new("/nonexistent/data.csv"), &cols(&["w1"]), "a", "y"),
            Err(HalError::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let w = array![[0.1, 1.0 / 3.0], [-2.5e-17, 1e300], [7.0, f64::MIN_POSITIVE]];
        let ds = Dataset::new(w, vec![1, 0, 1], vec![0.3, -1.0 / 7.0, 2.0])
            .unwrap()
            .with_names(cols(&["x", "z"]))
            .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path(), "a", "y").unwrap();
        let back = load_csv(f.path(), &cols(&["x", "z"]), "a", "y").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn stratified_balance_forced() {
        let w = Array2::zeros((10, 1));
        let a = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let ds = Dataset::new(w, a, vec![0.0; 10]).unwrap();
        let folds = make_folds(&ds, 5, 1).unwrap();
        for v in 0..5 {
            let rows = folds.validation_rows(v);
            assert_eq!(rows.len(), 2);
            assert_eq!(rows.iter().filter(|&&i| ds.a()[i] == 1).count(), 1);
        }
        assert_eq!(make_folds(&ds, 5, 1).unwrap(), folds);
    }

    #[test]
    fn seeds_change_assignment() {
        let n = 100;
        let a: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let ds = Dataset::new(Array2::zeros((n, 1)), a, vec![0.0; n]).unwrap();
        let f1 = make_folds(&ds, 5, 1).unwrap();
        let f2 = make_folds(&ds, 5, 2).unwrap();
        assert_ne!(f1.fold_of(), f2.fold_of());
    }

    #[test]
    fn fold_errors() {
        let ds = Dataset::new(Array2::zeros((6, 1)), vec![1, 1, 0, 0, 0, 0], vec![0.0; 6]).unwrap();
        assert!(make_folds(&ds, 1, 0).is_err());
        assert!(make_folds(&ds, 3, 0).is_err());
        assert!(make_folds(&ds, 2, 0).is_ok());
    }

    #[test]
    fn dataset_rejects_bad_inputs() {
        assert!(Dataset::new(Array2::zeros((0, 1)), vec![], vec![]).is_err());
        assert!(Dataset::new(Array2::zeros((2, 1)), vec![1], vec![0.0, 0.0]).is_err());
        assert!(Dataset::new(Array2::zeros((1, 1)), vec![3], vec![0.0]).is_err());
        assert!(Dataset::new(Array2::zeros((1, 1)), vec![1], vec![f64::NAN]).is_err());
        assert!(Dataset::new(array![[f64::INFINITY]], vec![1], vec![0.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn folds_partition_rows(labels in proptest::collection::vec(0u8..2, 20..80), v in 2usize..5, seed in any::<u64>()) {
                let n = labels.len();
                let treated = labels.iter().filter(|&&x| x == 1).count();
                prop_assume!(treated >= v && n - treated >= v);
                let ds = Dataset::new(Array2::zeros((n, 1)), labels.clone(), vec![0.0; n]).unwrap();
                let folds = make_folds(&ds, v, seed).unwrap();
                let mut seen = vec![0usize; n];
                for f in 0..v {
                    for i in folds.validation_rows(f) {
                        seen[i] += 1;
                    }
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
                for stratum in [0u8, 1u8] {
                    let sizes: Vec<usize> = (0..v)
                        .map(|f| folds.validation_rows(f).iter().filter(|&&i| labels[i] == stratum).count())
                        .collect();
                    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                    prop_assert!(hi - lo <= 1);
                }
            }
        }
    }
}
