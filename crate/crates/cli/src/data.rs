//! CSV ingestion, shuffled train/test splits and standardisation.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Per-column affine maps fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    /// Population moments; constant columns get a unit scale.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_std) = (0..x.ncols()).map(|j| moments(x.column(j).iter().copied())).unzip();
        let (y_mean, y_std) = moments(y.iter().copied());
        Standardization { x_mean, x_std, y_mean, y_std }
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn unapply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Where a split came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: PathBuf,
    pub target: String,
    pub train_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub stats: Option<Standardization>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_data(&self) -> CliResult<itergp::Data> {
        Ok(itergp::Data::new(self.x.clone(), self.y.clone())?)
    }
}

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    fn index_of(&self, name: &str) -> CliResult<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| CliError::input(format!("column '{name}' not found")))
    }

    /// The named columns as an n × k matrix, in the given order.
    pub fn select(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let idx = names.iter().map(|n| self.index_of(n)).collect::<CliResult<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.rows(), idx.len(), |i, j| self.columns[idx[j]][i]))
    }
}

/// Reads a CSV file with a header row and numeric cells only.
pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() {
        return Err(CliError::input(format!("{}: missing header row", path.display())));
    }
    let mut columns = vec![Vec::new(); names.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CliError::input(format!(
                    "{}: row {} column '{}' is not numeric: '{cell}'",
                    path.display(),
                    r + 1,
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::input(format!(
                    "{}: row {} column '{}' is not finite",
                    path.display(),
                    r + 1,
                    names[c]
                )));
            }
            columns[c].push(v);
        }
    }
    let table = Table { names, columns };
    if table.rows() == 0 {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }
    Ok(table)
}

/// Reads `path`, shuffles with `seed`, keeps round(fraction·n) rows (at least
/// one) for training and standardises both splits with training statistics.
pub fn ingest(path: &Path, target: &str, train_fraction: f64, seed: u64) -> CliResult<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(CliError::input("train fraction must lie in (0, 1]"));
    }
    let table = read_table(path)?;
    let feature_names: Vec<String> = table.names.iter().filter(|n| *n != target).cloned().collect();
    if feature_names.len() == table.names.len() {
        return Err(CliError::input(format!("target column '{target}' not found")));
    }
    if feature_names.is_empty() {
        return Err(CliError::input("no feature columns besides the target"));
    }
    let x = table.select(&feature_names)?;
    let y = DVector::from_column_slice(&table.columns[table.index_of(target)?]);
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n);
    let (tr, te) = order.split_at(n_train);
    let provenance =
        Provenance { path: path.to_path_buf(), target: target.to_string(), train_fraction, split_seed: seed };
    let (x_tr, y_tr) = (x.select_rows(tr), y.select_rows(tr));
    let stats = Standardization::fit(&x_tr, &y_tr);
    let make = |xs: DMatrix<f64>, ys: DVector<f64>| Dataset {
        x: stats.apply_x(&xs),
        y: stats.apply_y(&ys),
        feature_names: feature_names.clone(),
        stats: Some(stats.clone()),
        provenance: Some(provenance.clone()),
    };
    Ok((make(x_tr, y_tr), make(x.select_rows(te), y.select_rows(te))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(rows: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,y").unwrap();
        for i in 0..rows {
            writeln!(f, "{},{},{}", i, (i * i) % 7, 3.0 * i as f64 + 1.0).unwrap();
        }
        f
    }

    #[test]
    fn ten_rows_split_nine_one() {
        let f = write_csv(10);
        let (tr, te) = ingest(f.path(), "y", 0.9, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert_eq!(tr.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn same_seed_same_split() {
        let f = write_csv(30);
        let a = ingest(f.path(), "y", 0.9, 5).unwrap();
        let b = ingest(f.path(), "y", 0.9, 5).unwrap();
        assert_eq!(a, b);
        let c = ingest(f.path(), "y", 0.9, 6).unwrap();
        assert_ne!(a.0.y, c.0.y);
    }

    #[test]
    fn train_targets_are_standardised() {
        let f = write_csv(50);
        let (tr, _) = ingest(f.path(), "y", 0.9, 1).unwrap();
        let n = tr.len() as f64;
        let mean = tr.y.sum() / n;
        let std = (tr.y.map(|v| (v - mean).powi(2)).sum() / n).sqrt();
        assert!(mean.abs() <= 1e-10 && (std - 1.0).abs() <= 1e-10);
        let stats = tr.stats.as_ref().unwrap();
        let raw = stats.unapply_y(&tr.y);
        assert!(raw.iter().all(|v| ((v - 1.0) / 3.0 - ((v - 1.0) / 3.0).round()).abs() < 1e-9));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,y\n1,2\nx,3").unwrap();
        assert!(matches!(ingest(f.path(), "y", 0.9, 0), Err(CliError::Input(_))));
        let g = write_csv(5);
        assert!(matches!(ingest(g.path(), "z", 0.9, 0), Err(CliError::Input(_))));
        let mut h = tempfile::NamedTempFile::new().unwrap();
        writeln!(h, "a,y").unwrap();
        assert!(matches!(ingest(h.path(), "y", 0.9, 0), Err(CliError::Input(_))));
        let mut k = tempfile::NamedTempFile::new().unwrap();
        writeln!(k, "a,y\n1,NaN").unwrap();
        assert!(ingest(k.path(), "y", 0.9, 0).is_err());
    }
}
