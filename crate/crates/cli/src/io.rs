//! CSV ingestion, numeric formatting and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cve_core::{CveError, DataSet};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Fixed-width scientific notation with 17 significant digits; parses back
/// to the identical `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone)]
pub struct Table {
    pub data: DataSet,
    pub predictors: Vec<String>,
    pub response: String,
    pub sha256: String,
}

pub fn read_table(path: &Path, response: &str) -> Result<Table, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Input(format!("{}: cannot read header row: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let target = headers
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| CliError::Input(format!("{}: no column named '{response}' in header {headers:?}", path.display())))?;
    if headers.len() < 2 {
        return Err(CliError::Input(format!("{}: need the response and at least one predictor column", path.display())));
    }

    let mut y = Vec::new();
    let mut x = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            let value = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "{}: row {line}, column '{}': '{field}' is not a finite number",
                        path.display(),
                        headers[col]
                    ))
                })?;
            if col == target {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    let p = headers.len() - 1;
    let data = DataSet::new(DVector::from_vec(y), DMatrix::from_row_slice(n, p, &x)).map_err(CliError::from)?;
    let predictors = headers.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, h)| h.clone()).collect();
    Ok(Table { data, predictors, response: response.to_owned(), sha256 })
}

#[derive(Debug, Clone, Serialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centers every column and scales it to unit sample standard deviation.
pub fn standardize(table: &Table) -> Result<(DataSet, Standardization), CliError> {
    let data = &table.data;
    if data.n() < 2 {
        return Err(CliError::Input("standardization needs at least two rows".into()));
    }
    let mut x = data.x().clone();
    let mut x_mean = Vec::with_capacity(data.p());
    let mut x_sd = Vec::with_capacity(data.p());
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let (m, s) = mean_sd(&col.iter().copied().collect::<Vec<_>>());
        if !(s > 0.0) {
            return Err(CliError::Input(format!("column '{}' is constant and cannot be standardized", table.predictors[j])));
        }
        col.apply(|v| *v = (*v - m) / s);
        x_mean.push(m);
        x_sd.push(s);
    }
    let (y_mean, y_sd) = mean_sd(data.y().as_slice());
    if !(y_sd > 0.0) {
        return Err(CliError::Input(format!("response '{}' is constant and cannot be standardized", table.response)));
    }
    let y = data.y().map(|v| (v - y_mean) / y_sd);
    Ok((DataSet::new(y, x)?, Standardization { x_mean, x_sd, y_mean, y_sd }))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Execution details that do not affect results.
#[derive(Debug, Clone, Serialize)]
pub struct Runtime {
    pub threads: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: C,
    pub input: Option<InputDigest>,
    pub runtime: Runtime,
}

pub struct Clock(Instant);

impl Clock {
    pub fn start() -> Self {
        Clock(Instant::now())
    }

    pub fn manifest<C: Serialize>(&self, command: &'static str, seed: u64, config: C, input: Option<InputDigest>) -> Manifest<C> {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            input,
            runtime: Runtime { threads: rayon::current_num_threads(), elapsed_seconds: self.0.elapsed().as_secs_f64() },
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Output(format!("cannot write {}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(fail)?;
    writer.write_record(header).map_err(fail)?;
    for row in rows {
        writer.write_record(row).map_err(fail)?;
    }
    writer.flush().map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))
}

/// `sweep.csv` -> `sweep.csv.manifest.json`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub column_major: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixRecord { rows: m.nrows(), cols: m.ncols(), column_major: m.as_slice().to_vec() }
    }
}

impl From<CveError> for CliError {
    fn from(e: CveError) -> Self {
        match e {
            CveError::InvalidDimension(_) | CveError::InvalidArgument(_) | CveError::UnsupportedKernel(_) => {
                CliError::Input(e.to_string())
            }
            CveError::DimensionFit { ref source, .. } if matches!(CliError::from((**source).clone()), CliError::Input(_)) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
