//! File input and output: CSV parsing with located errors, atomic writes,
//! reproducibility sidecars and histogram bins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use fracinfer::stats::quantile;

use crate::CliError;

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| CliError::Io(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(v: &T) -> Result<String, CliError> {
    toml::to_string(v).map_err(|e| CliError::Io(format!("cannot serialise report: {e}")))
}

/// Hex SHA-256 of the canonical TOML form of `v`.
pub fn config_hash<T: Serialize>(v: &T) -> Result<String, CliError> {
    let digest = Sha256::digest(to_toml(v)?.as_bytes());
    Ok(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    outputs: Vec<String>,
    config: &'a T,
}

/// `<dir>/<command>.meta.toml` holding the resolved configuration, its hash and the seed.
pub fn write_sidecar<T: Serialize>(dir: &Path, command: &str, seed: u64, config: &T, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let meta = Sidecar {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: config_hash(config)?,
        outputs: outputs.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
        config,
    };
    let path = dir.join(format!("{command}.meta.toml"));
    write_atomic(&path, to_toml(&meta)?.as_bytes())?;
    Ok(path)
}

/// Header and rows of a CSV file; each row keeps its 1-based line number.
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let header = rdr
            .headers()
            .map_err(|e| CliError::Parse(format!("{}: line 1: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                CliError::Parse(format!("{}: line {line}: {e}", path.display()))
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { path: path.to_path_buf(), header, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| {
            CliError::Config(format!(
                "{}: column '{name}' not found; available columns: {}",
                self.path.display(),
                self.header.join(", ")
            ))
        })
    }

    pub fn number(&self, row: usize, col: usize) -> Result<f64, CliError> {
        let (line, rec) = &self.rows[row];
        let raw = rec.get(col).map(String::as_str).unwrap_or("");
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
            CliError::Parse(format!(
                "{}: line {line}: column '{}': '{raw}' is not a finite number",
                self.path.display(),
                self.header[col]
            ))
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let c = self.column_index(name)?;
        (0..self.rows.len()).map(|r| self.number(r, c)).collect()
    }
}

/// CSV text from a header and numeric rows; numbers use the shortest
/// representation that parses back to the same value.
pub fn csv_text(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Freedman-Diaconis bins, width 2·IQR·n^{-1/3}; one bin when the width vanishes.
pub fn histogram(values: &[f64]) -> Vec<Bin> {
    if values.is_empty() {
        return vec![];
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let iqr = quantile(values, 0.75) - quantile(values, 0.25);
    let width = 2.0 * iqr / (values.len() as f64).cbrt();
    if !(width > 0.0) || hi == lo {
        return vec![Bin { lower: lo, upper: hi, count: values.len() }];
    }
    let bins = ((hi - lo) / width).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| Bin { lower: lo + k as f64 * width, upper: lo + (k + 1) as f64 * width, count })
        .collect()
}
