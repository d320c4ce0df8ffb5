//! Core data model: assignment probabilities, experiment tables, CSV loading.
//!
//! An experiment over n units carries a matching covariate matrix psi (used
//! only to build designs), an adjustment covariate matrix h, an optional
//! auxiliary covariate matrix z, outcomes y, and binary treatments d. All
//! blocks share the row count n; y and d may be absent (length 0) for tables
//! that only feed design construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

/// Rational assignment probability p = a/k in lowest terms.
///
/// Each group of k units receives exactly a treated slots, so the fraction is
/// kept as integers rather than a float; 1 <= a < k and gcd(a, k) = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Propensity {
    pub a: u32,
    pub k: u32,
}

fn gcd(mut x: u32, mut y: u32) -> u32 {
    while y != 0 {
        let r = x % y;
        x = y;
        y = r;
    }
    x
}

impl Propensity {
    /// Validates 1 <= a < k and coprimality.
    pub fn new(a: u32, k: u32) -> Result<Self> {
        if a == 0 || a >= k {
            return Err(Error::InvalidPropensity(format!(
                "{a}/{k} is not strictly between 0 and 1"
            )));
        }
        if gcd(a, k) != 1 {
            return Err(Error::InvalidPropensity(format!(
                "{a}/{k} is not in lowest terms"
            )));
        }
        Ok(Propensity { a, k })
    }

    /// Reduces a treated count over a total count to lowest terms. Used to
    /// recover p from realized assignments when no design object is at hand.
    pub fn from_counts(treated: usize, total: usize) -> Result<Self> {
        if total == 0 || treated == 0 || treated >= total {
            return Err(Error::InvalidPropensity(format!(
                "{treated} treated of {total} units"
            )));
        }
        let g = gcd(treated as u32, total as u32);
        Propensity::new(treated as u32 / g, total as u32 / g)
    }

    /// Parses "a/k" strings, e.g. from a command line.
    pub fn parse(text: &str) -> Result<Self> {
        let (a, k) = text
            .split_once('/')
            .ok_or_else(|| Error::InvalidPropensity(format!("expected a/k, got {text:?}")))?;
        let a: u32 = a
            .trim()
            .parse()
            .map_err(|_| Error::InvalidPropensity(format!("bad numerator in {text:?}")))?;
        let k: u32 = k
            .trim()
            .parse()
            .map_err(|_| Error::InvalidPropensity(format!("bad denominator in {text:?}")))?;
        Propensity::new(a, k)
    }

    pub fn p(&self) -> f64 {
        f64::from(self.a) / f64::from(self.k)
    }

    /// Scale factor s = sqrt(p(1-p)) used throughout the adjusted estimators.
    pub fn s(&self) -> f64 {
        let p = self.p();
        (p * (1.0 - p)).sqrt()
    }
}

impl std::fmt::Display for Propensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.a, self.k)
    }
}

/// One experiment table. Matrices are n x d_psi, n x d_h, n x d_z; any of the
/// covariate blocks may have zero columns. y and d are either length n or
/// empty for covariate-only tables.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub n: usize,
    pub psi: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: Vec<f64>,
    pub d: Vec<u8>,
}

impl ExperimentData {
    /// Validates shapes, binary treatments, finiteness, and that the sample
    /// covariance of h is nonsingular (in particular no constant h column).
    pub fn new(
        psi: DMatrix<f64>,
        h: DMatrix<f64>,
        z: DMatrix<f64>,
        y: Vec<f64>,
        d: Vec<u8>,
    ) -> Result<Self> {
        let n = psi.nrows().max(h.nrows()).max(z.nrows()).max(y.len()).max(d.len());
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        for (name, rows) in [("psi", psi.nrows()), ("h", h.nrows()), ("z", z.nrows())] {
            if rows != n && !(rows == 0 && matches!(name, "psi" | "h" | "z")) {
                return Err(Error::GroupStructure(format!(
                    "{name} has {rows} rows, expected {n}"
                )));
            }
        }
        // Zero-column blocks are stored with n rows so row indexing stays uniform.
        let psi = if psi.ncols() == 0 { DMatrix::zeros(n, 0) } else { psi };
        let h = if h.ncols() == 0 { DMatrix::zeros(n, 0) } else { h };
        let z = if z.ncols() == 0 { DMatrix::zeros(n, 0) } else { z };
        if !y.is_empty() && y.len() != n {
            return Err(Error::GroupStructure(format!(
                "y has {} entries, expected {n}",
                y.len()
            )));
        }
        if !d.is_empty() && d.len() != n {
            return Err(Error::GroupStructure(format!(
                "d has {} entries, expected {n}",
                d.len()
            )));
        }
        for (row, &v) in d.iter().enumerate() {
            if v > 1 {
                return Err(Error::NonBinaryTreatment(row + 1));
            }
        }
        for m in [&psi, &h, &z] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("covariate matrix has a non-finite entry".into()));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("outcome vector has a non-finite entry".into()));
        }
        // Nonsingular sample covariance of h, checked as full column rank of
        // the demeaned block. Skipped for n < 2 where no covariance exists.
        if h.ncols() > 0 && n >= 2 {
            let centered = linalg::demean(&h);
            let svd = centered.svd(false, false);
            let smax = svd.singular_values.max();
            let tol = 1e-10 * smax;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            if smax == 0.0 || rank < h.ncols() {
                return Err(Error::RankDeficient);
            }
        }
        Ok(ExperimentData { n, psi, h, z, y, d })
    }

    /// Number of treated units. Errors if either arm is empty.
    pub fn arm_counts(&self) -> Result<(usize, usize)> {
        if self.d.len() != self.n {
            return Err(Error::EmptyArm);
        }
        let n1 = self.d.iter().filter(|&&v| v == 1).count();
        let n0 = self.n - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::EmptyArm);
        }
        Ok((n1, n0))
    }

    /// Assignment probability implied by the realized treated share, reduced
    /// to lowest terms. Exact under any design this crate produces.
    pub fn implied_propensity(&self) -> Result<Propensity> {
        let (n1, _) = self.arm_counts()?;
        Propensity::from_counts(n1, self.n)
    }

    /// Keeps only the given rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&i| i >= self.n) {
            return Err(Error::GroupStructure("row index out of range".into()));
        }
        let take = |m: &DMatrix<f64>| {
            DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
        };
        ExperimentData::new(
            take(&self.psi),
            take(&self.h),
            take(&self.z),
            if self.y.is_empty() { vec![] } else { rows.iter().map(|&i| self.y[i]).collect() },
            if self.d.is_empty() { vec![] } else { rows.iter().map(|&i| self.d[i]).collect() },
        )
    }
}

/// Column-name schema for CSV ingestion. Covariate blocks are collected by
/// header prefix and ordered by numeric suffix (psi_0, psi_1, ...); names
/// without a numeric suffix sort after the numbered ones, lexicographically.
/// Setting y or d to None skips that column, producing a covariate-only table.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub y: Option<String>,
    pub d: Option<String>,
    pub psi_prefix: String,
    pub h_prefix: String,
    pub z_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            y: Some("y".into()),
            d: Some("d".into()),
            psi_prefix: "psi_".into(),
            h_prefix: "h_".into(),
            z_prefix: "z_".into(),
        }
    }
}

impl CsvSchema {
    /// Schema for design-stage tables that carry covariates but no outcomes.
    pub fn covariates_only() -> Self {
        CsvSchema { y: None, d: None, ..CsvSchema::default() }
    }
}

fn prefixed_columns(headers: &[String], prefix: &str) -> Vec<(usize, String)> {
    let mut cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, name)| name.starts_with(prefix))
        .map(|(i, name)| (i, name.clone()))
        .collect();
    cols.sort_by(|(_, a), (_, b)| {
        let key = |name: &str| {
            let suffix = &name[prefix.len()..];
            match suffix.parse::<u64>() {
                Ok(v) => (0u8, v, String::new()),
                Err(_) => (1u8, 0, suffix.to_owned()),
            }
        };
        key(a).cmp(&key(b))
    });
    cols
}

fn parse_cell(raw: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::NonNumericCell { row, col: col.to_owned() })?;
    if !v.is_finite() {
        return Err(Error::NonNumericCell { row, col: col.to_owned() });
    }
    Ok(v)
}

/// Loads an experiment table from a headered CSV file.
///
/// Cells in mapped columns must parse as finite reals; the treatment column
/// must hold literally "0" or "1". Row numbers in errors are 1-based data
/// rows (the header is row 0). Absent covariate prefixes yield zero-column
/// blocks rather than errors.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<ExperimentData> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_owned()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let y_idx = schema.y.as_deref().map(find).transpose()?;
    let d_idx = schema.d.as_deref().map(find).transpose()?;
    let psi_cols = prefixed_columns(&headers, &schema.psi_prefix);
    let h_cols = prefixed_columns(&headers, &schema.h_prefix);
    let z_cols = prefixed_columns(&headers, &schema.z_prefix);

    let mut psi_rows: Vec<f64> = Vec::new();
    let mut h_rows: Vec<f64> = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut d: Vec<u8> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |idx: usize| record.get(idx).unwrap_or("");
        for &(idx, ref name) in &psi_cols {
            psi_rows.push(parse_cell(cell(idx), row, name)?);
        }
        for &(idx, ref name) in &h_cols {
            h_rows.push(parse_cell(cell(idx), row, name)?);
        }
        for &(idx, ref name) in &z_cols {
            z_rows.push(parse_cell(cell(idx), row, name)?);
        }
        if let Some(idx) = y_idx {
            y.push(parse_cell(cell(idx), row, schema.y.as_deref().unwrap())?);
        }
        if let Some(idx) = d_idx {
            match cell(idx).trim() {
                "0" => d.push(0),
                "1" => d.push(1),
                _ => return Err(Error::NonBinaryTreatment(row)),
            }
        }
        n = row;
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let from_rows = |flat: &[f64], cols: usize| {
        // Row-major accumulation, column-major storage.
        DMatrix::from_fn(n, cols, |i, j| flat[i * cols + j])
    };
    ExperimentData::new(
        from_rows(&psi_rows, psi_cols.len()),
        from_rows(&h_rows, h_cols.len()),
        from_rows(&z_rows, z_cols.len()),
        y,
        d,
    )
}

/// Reads a single named column of a CSV as raw strings, for treatment uptake,
/// stratum labels, or group id columns that live beside the main schema.
pub fn load_csv_column<P: AsRef<Path>>(path: P, column: &str) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_owned()).collect();
    let idx = headers
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| Error::MissingColumn(column.to_owned()))?;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        values.push(record.get(idx).unwrap_or("").trim().to_owned());
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values)
}
