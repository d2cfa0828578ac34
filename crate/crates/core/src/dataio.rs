//! Datasets: CSV ingestion, seeded splits, standardization and the toy gap
//! generator.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    /// Feature column names followed by the target column name.
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        if targets.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} feature rows",
                targets.len(),
                features.rows()
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("targets".into()));
        }
        Ok(Self {
            features,
            targets,
            column_names,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.column_names[..self.n_features().min(self.column_names.len())]
    }

    pub fn target_name(&self) -> Option<&str> {
        self.column_names.get(self.n_features()).map(String::as_str)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.n_features();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Dataset {
            features: Matrix::new(indices.len(), d, values).expect("rows come from a valid matrix"),
            targets,
            column_names: self.column_names.clone(),
        }
    }
}

/// Header and numeric cells of a CSV file; lines starting with `#` are
/// skipped. Row numbers in errors count data rows from 1.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let err = |message: String| Error::Ingestion {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| err(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(err(format!(
                "row {row}: expected {} cells, found {}",
                header.len(),
                record.len()
            )));
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let v: f64 = cell.parse().map_err(|_| {
                    err(format!(
                        "row {row}, column '{}': cannot parse '{cell}' as a number",
                        header[c]
                    ))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("row {row}, column '{}': non-finite value", header[c])))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}

pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Ingestion {
            path: path.to_path_buf(),
            message: format!("target column '{target_column}' not found in header"),
        })?;
    let mut names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = names.len();
    names.push(target_column.to_owned());

    let mut values = Vec::with_capacity(rows.len() * d);
    let mut targets = Vec::with_capacity(rows.len());
    for row in rows {
        for (c, v) in row.into_iter().enumerate() {
            if c == target_idx {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = targets.len();
    Dataset::new(Matrix::new(n, d, values)?, targets, names)
}

/// Reads only the named columns, in the given order (no target needed).
pub fn load_csv_features(path: impl AsRef<Path>, columns: &[String]) -> Result<Matrix> {
    let path = path.as_ref();
    let (header, rows) = read_table(path)?;
    let idx = columns
        .iter()
        .map(|c| {
            header.iter().position(|h| h == c).ok_or_else(|| Error::Ingestion {
                path: path.to_path_buf(),
                message: format!("column '{c}' not found in header"),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let values = rows.iter().flat_map(|r| idx.iter().map(|&i| r[i])).collect();
    Matrix::new(rows.len(), columns.len(), values)
}

/// Writes features and target under the stored column names.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, csv_string(d))?;
    Ok(())
}

pub fn csv_string(d: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(&d.column_names.join(","));
    out.push('\n');
    for i in 0..d.len() {
        for v in d.row(i) {
            out.push_str(&format_real(*v));
            out.push(',');
        }
        out.push_str(&format_real(d.targets[i]));
        out.push('\n');
    }
    out
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config(format!("split fractions must lie in (0, 1), got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        Ok(())
    }

    /// Partition sizes for `n` rows: train and val rounded down, the rest to
    /// test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps e.g. 0.29 * 100 = 28.999... from losing a row.
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let train = floor(self.train_fraction).min(n);
        let val = floor(self.val_fraction).min(n - train);
        (train, val, n - train - val)
    }
}

/// Fisher–Yates shuffle of `0..n` driven by ChaCha8 seeded through
/// `seed_from_u64`: for `i = n-1 … 1`, swap `i` with `next_u64() % (i + 1)`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Index partitions `(train, val, test)` for `n` rows.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 rows to split, got {n}")));
    }
    let (a, b, c) = spec.sizes(n);
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Config(format!(
            "split of {n} rows leaves an empty partition (sizes {a}, {b}, {c})"
        )));
    }
    let idx = shuffled_indices(n, spec.seed);
    Ok((idx[..a].to_vec(), idx[a..a + b].to_vec(), idx[a + b..].to_vec()))
}

pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = split_indices(d.len(), spec)?;
    Ok((d.select(&a), d.select(&b), d.select(&c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // Constant columns (up to rounding in the mean) get unit scale.
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        (mean, 1.0)
    } else {
        (mean, std)
    }
}

/// Per-column population mean and standard deviation over the training rows.
pub fn fit_standardizer(train: &Dataset) -> Result<Standardizer> {
    if train.is_empty() {
        return Err(Error::Config("cannot standardize an empty dataset".into()));
    }
    let d = train.n_features();
    let mut feature_means = Vec::with_capacity(d);
    let mut feature_stds = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = mean_std((0..train.len()).map(|i| train.features.get(i, j)));
        feature_means.push(m);
        feature_stds.push(s);
    }
    let (target_mean, target_std) = mean_std(train.targets.iter().copied());
    Ok(Standardizer {
        feature_means,
        feature_stds,
        target_mean,
        target_std,
    })
}

impl Standardizer {
    pub fn apply_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.n_features() != self.feature_means.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} features applied to {}",
                self.feature_means.len(),
                d.n_features()
            )));
        }
        let mut values = Vec::with_capacity(d.len() * d.n_features());
        for i in 0..d.len() {
            values.extend(self.apply_features(d.row(i)));
        }
        let targets = d.targets.iter().map(|&y| self.apply_target(y)).collect();
        Dataset::new(
            Matrix::new(d.len(), d.n_features(), values)?,
            targets,
            d.column_names.clone(),
        )
    }

    pub fn invert_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Maps a standardized predictive mean and variance back to target units.
    pub fn invert_target(&self, mean: f64, variance: f64) -> (f64, f64) {
        (
            self.target_mean + self.target_std * mean,
            self.target_std * self.target_std * variance,
        )
    }
}

/// Toy 1-D regression with a gap: `x` uniform on `[-3,-1] ∪ [1,3]`
/// (alternating intervals, so each holds half the points),
/// `y = sin(2x) + 0.1·ε`.
pub fn make_toy_gap(n: usize, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("toy dataset needs at least 10 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random_range(1.0..=3.0);
        let x = if i % 2 == 0 { -u } else { u };
        let eps: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push((2.0 * x).sin() + 0.1 * eps);
    }
    Dataset::new(Matrix::new(n, 1, xs)?, ys, vec!["x".to_owned(), "y".to_owned()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_tmp("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let d = load_csv(f.path(), "y").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.row(1), &[4.0, 5.0]);
        assert_eq!(d.targets, vec![3.0, 6.0, 9.0]);
        assert_eq!(d.target_name(), Some("y"));
    }

    #[test]
    fn target_in_middle_keeps_header_order() {
        let f = write_tmp("a,y,b\n1,2,3\n");
        let d = load_csv(f.path(), "y").unwrap();
        assert_eq!(d.row(0), &[1.0, 3.0]);
        assert_eq!(d.feature_names(), &["a".to_owned(), "b".to_owned()]);
    }

    #[test]
    fn missing_target_column() {
        let f = write_tmp("a,b,y\n1,2,3\n");
        let e = load_csv(f.path(), "z").unwrap_err().to_string();
        assert!(e.contains("'z'"), "{e}");
    }

    #[test]
    fn bad_cell_reports_row() {
        let f = write_tmp("a,b,y\n1,2,3\nabc,5,6\n");
        let e = load_csv(f.path(), "y").unwrap_err().to_string();
        assert!(e.contains("row 2"), "{e}");
        assert!(e.contains("'a'"), "{e}");
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_csv("/nonexistent/data.csv", "y"),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let d = make_toy_gap(20, 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&d, f.path()).unwrap();
        assert_eq!(load_csv(f.path(), "y").unwrap(), d);
    }

    fn ramp(n: usize) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        Dataset::new(Matrix::new(n, 1, x.clone()).unwrap(), x, vec!["x".into(), "y".into()]).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = split(&ramp(10), &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let spec = SplitSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(split_indices(50, &spec).unwrap(), split_indices(50, &spec).unwrap());
        let other = SplitSpec { seed: 43, ..spec };
        assert_ne!(split_indices(50, &spec).unwrap(), split_indices(50, &other).unwrap());
    }

    #[test]
    fn split_too_small() {
        let spec = SplitSpec {
            train_fraction: 0.4,
            val_fraction: 0.3,
            test_fraction: 0.3,
            seed: 0,
        };
        assert!(matches!(split(&ramp(2), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let spec = SplitSpec {
            train_fraction: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        };
        assert!(split(&ramp(10), &spec).is_err());
    }

    #[test]
    fn constant_column_has_unit_std() {
        let d = Dataset::new(
            Matrix::from_rows(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]]).unwrap(),
            vec![1.0, 2.0, 3.0],
            vec!["a".into(), "b".into(), "y".into()],
        )
        .unwrap();
        let s = fit_standardizer(&d).unwrap();
        assert_eq!(s.feature_stds[0], 1.0);
        let z = s.apply(&d).unwrap();
        assert!((0..3).all(|i| z.features.get(i, 0) == 0.0));
    }

    #[test]
    fn target_variance_scales_by_std_squared() {
        let s = Standardizer {
            feature_means: vec![],
            feature_stds: vec![],
            target_mean: 3.0,
            target_std: 2.0,
        };
        assert_eq!(s.invert_target(0.5, 0.25), (4.0, 1.0));
    }

    #[test]
    fn empty_dataset_cannot_be_standardized() {
        let d = Dataset::new(Matrix::zeros(0, 1), vec![], vec!["x".into(), "y".into()]).unwrap();
        assert!(matches!(fit_standardizer(&d), Err(Error::Config(_))));
    }

    #[test]
    fn toy_support_and_determinism() {
        let d = make_toy_gap(1000, 7).unwrap();
        assert!((0..d.len()).all(|i| {
            let x = d.row(i)[0].abs();
            (1.0..=3.0).contains(&x)
        }));
        let neg = (0..d.len()).filter(|&i| d.row(i)[0] < 0.0).count();
        assert_eq!(neg, 500);
        assert_eq!(d, make_toy_gap(1000, 7).unwrap());
        assert!(make_toy_gap(9, 0).is_err());
    }

    #[test]
    fn toy_noise_variance() {
        let n = 10_000;
        let d = make_toy_gap(n, 11).unwrap();
        let r: Vec<f64> = (0..n).map(|i| d.targets[i] - (2.0 * d.row(i)[0]).sin()).collect();
        let m = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        // For Gaussian noise the sample variance has sd ≈ σ²·sqrt(2/(n-1)).
        let se = 0.01 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 0.01).abs() <= 3.0 * se, "var = {var}");
    }

    proptest! {
        #[test]
        fn split_partitions_cover_rows(n in 3usize..300, seed in any::<u64>()) {
            let spec = SplitSpec { train_fraction: 0.5, val_fraction: 0.25, test_fraction: 0.25, seed };
            if let Ok((a, b, c)) = split_indices(n, &spec) {
                let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn standardize_round_trip(rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..50)) {
            let d = Dataset::new(
                Matrix::new(rows.len(), 1, rows.iter().map(|r| r.0).collect()).unwrap(),
                rows.iter().map(|r| r.1).collect(),
                vec!["x".into(), "y".into()],
            ).unwrap();
            let s = fit_standardizer(&d).unwrap();
            let z = s.apply(&d).unwrap();
            let mean: f64 = (0..z.len()).map(|i| z.features.get(i, 0)).sum::<f64>() / z.len() as f64;
            prop_assert!(mean.abs() <= 1e-10);
            for i in 0..d.len() {
                let (y, _) = s.invert_target(z.targets[i], 0.0);
                prop_assert!((y - d.targets[i]).abs() <= 1e-12 * d.targets[i].abs().max(s.target_mean.abs()).max(1.0));
                let x = s.invert_features(z.row(i))[0];
                prop_assert!((x - d.row(i)[0]).abs() <= 1e-12 * d.row(i)[0].abs().max(s.feature_means[0].abs()).max(1.0));
            }
        }
    }
}
