//! CSV ingestion of area-level data and report rendering.
//!
//! Areas file: `area_id, y_1..y_k, x_1_1..x_k_s` with the entries of `X_i`
//! in row-major order. Covariance file: `area_id, d_1_1..d_k_k`, also
//! row-major. The two files are joined on `area_id` and the areas file fixes
//! the order.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value parses back to the same `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{validate_dataset, AreaRecord, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!("unknown output format '{other}'"))),
        }
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn parse_number(field: &str, line: usize, column: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_error(line, format!("column {column}: '{field}' is not a number")))
}

/// Checks that `names` is exactly `prefix_1_1, prefix_1_2, …` over `rows × cols`.
fn check_indexed(names: &[&str], prefix: &str, rows: usize, cols: usize) -> Result<()> {
    for (n, name) in names.iter().enumerate() {
        let expected = format!("{prefix}_{}_{}", n / cols + 1, n % cols + 1);
        if name.trim() != expected {
            return Err(parse_error(1, format!("expected column '{expected}', found '{name}'")));
        }
    }
    if names.len() != rows * cols {
        return Err(parse_error(1, format!("expected {} {prefix} columns, found {}", rows * cols, names.len())));
    }
    Ok(())
}

struct AreasHeader {
    k: usize,
    s: usize,
}

fn parse_areas_header(header: &csv::StringRecord) -> Result<AreasHeader> {
    let names: Vec<&str> = header.iter().collect();
    if names.first().map(|s| s.trim()) != Some("area_id") {
        return Err(parse_error(1, "first column of the areas file must be area_id"));
    }
    let k = names[1..].iter().take_while(|n| n.trim().starts_with("y_")).count();
    if k == 0 {
        return Err(parse_error(1, "areas file has no y_ columns"));
    }
    for (j, name) in names[1..=k].iter().enumerate() {
        if name.trim() != format!("y_{}", j + 1) {
            return Err(parse_error(1, format!("expected column 'y_{}', found '{name}'", j + 1)));
        }
    }
    let xs = &names[k + 1..];
    if !xs.len().is_multiple_of(k) {
        return Err(parse_error(1, format!("{} x columns is not a multiple of k = {k}", xs.len())));
    }
    let s = xs.len() / k;
    check_indexed(xs, "x", k, s)?;
    Ok(AreasHeader { k, s })
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(src)
}

/// Parses the two CSV sources into a validated dataset.
pub fn read_dataset<A: Read, C: Read>(areas_src: A, cov_src: C) -> Result<Dataset> {
    let mut areas_rdr = reader(areas_src);
    let AreasHeader { k, s } = parse_areas_header(areas_rdr.headers()?)?;

    let mut rows: Vec<(String, DVector<f64>, DMatrix<f64>)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in areas_rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != 1 + k + k * s {
            return Err(parse_error(line, format!("expected {} fields, found {}", 1 + k + k * s, rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_error(line, "empty area_id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(parse_error(line, format!("duplicate area_id '{id}' (first seen on line {first})")));
        }
        let y = (0..k)
            .map(|j| parse_number(&rec[1 + j], line, &format!("y_{}", j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let x = (0..k * s)
            .map(|n| parse_number(&rec[1 + k + n], line, &format!("x_{}_{}", n / s + 1, n % s + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, DVector::from_vec(y), DMatrix::from_row_slice(k, s, &x)));
    }

    let mut cov_rdr = reader(cov_src);
    let cov_names: Vec<String> = cov_rdr.headers()?.iter().map(str::to_string).collect();
    if cov_names.first().map(String::as_str) != Some("area_id") {
        return Err(parse_error(1, "first column of the covariance file must be area_id"));
    }
    let refs: Vec<&str> = cov_names[1..].iter().map(String::as_str).collect();
    check_indexed(&refs, "d", k, k)?;

    let mut covs: HashMap<String, DMatrix<f64>> = HashMap::new();
    for rec in cov_rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != 1 + k * k {
            return Err(parse_error(line, format!("expected {} fields, found {}", 1 + k * k, rec.len())));
        }
        let id = rec[0].to_string();
        if !seen.contains_key(&id) {
            return Err(parse_error(line, format!("area_id '{id}' does not appear in the areas file")));
        }
        let d = (0..k * k)
            .map(|n| parse_number(&rec[1 + n], line, &format!("d_{}_{}", n / k + 1, n % k + 1)))
            .collect::<Result<Vec<_>>>()?;
        if covs.insert(id.clone(), DMatrix::from_row_slice(k, k, &d)).is_some() {
            return Err(parse_error(line, format!("duplicate area_id '{id}' in covariance file")));
        }
    }

    let records = rows
        .into_iter()
        .map(|(id, y, x)| {
            let d = covs.remove(&id).ok_or_else(|| Error::MissingArea(id.clone()))?;
            Ok(AreaRecord::new(id, y, x, d))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_dataset(records)
}

pub fn load_dataset(areas_path: impl AsRef<Path>, cov_path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(areas_path)?, File::open(cov_path)?)
}

/// Formats an `f64` so that it parses back exactly.
pub fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Writes the two CSV files read by [`load_dataset`].
pub fn write_dataset<A: Write, C: Write>(data: &Dataset, areas_out: A, cov_out: C) -> Result<()> {
    let (k, s) = (data.k(), data.s());
    let mut w = csv::Writer::from_writer(areas_out);
    let mut header = vec!["area_id".to_string()];
    header.extend((1..=k).map(|j| format!("y_{j}")));
    header.extend((0..k * s).map(|n| format!("x_{}_{}", n / s + 1, n % s + 1)));
    w.write_record(&header)?;
    for a in data.areas() {
        let mut row = vec![a.area_id.clone()];
        row.extend(a.y.iter().map(|&v| fmt_num(v)));
        row.extend((0..k * s).map(|n| fmt_num(a.x[(n / s, n % s)])));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(cov_out);
    let mut header = vec!["area_id".to_string()];
    header.extend((0..k * k).map(|n| format!("d_{}_{}", n / k + 1, n % k + 1)));
    w.write_record(&header)?;
    for a in data.areas() {
        let mut row = vec![a.area_id.clone()];
        row.extend((0..k * k).map(|n| fmt_num(a.d[(n / k, n % k)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(data: &Dataset, areas_path: impl AsRef<Path>, cov_path: impl AsRef<Path>) -> Result<()> {
    write_dataset(data, File::create(areas_path)?, File::create(cov_path)?)
}

/// Nested row arrays.
pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())).collect())
}

pub fn vector_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

/// Rectangular table of preformatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Long-format table `table,label,row,col,value` used for matrix-valued output.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTable(pub CsvTable);

impl Default for LongTable {
    fn default() -> Self {
        Self(CsvTable::new(["table", "label", "row", "col", "value"]))
    }
}

impl LongTable {
    /// Adds every entry of `m` with 1-based row and column indices.
    pub fn matrix(&mut self, table: &str, label: &str, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.cell(table, label, i + 1, j + 1, Some(m[(i, j)]));
            }
        }
    }

    /// `None` is written as an empty field.
    pub fn cell(&mut self, table: &str, label: &str, row: usize, col: usize, value: Option<f64>) {
        self.0.push(vec![
            table.to_string(),
            label.to_string(),
            row.to_string(),
            col.to_string(),
            value.map(fmt_num).unwrap_or_default(),
        ]);
    }
}

/// A command's output: the JSON document `{meta, per_area, per_group}` and
/// its CSV rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub meta: Map<String, Value>,
    pub per_area: Vec<Value>,
    pub per_group: Vec<Value>,
    pub csv: CsvTable,
}

impl Report {
    pub fn to_json(&self) -> Value {
        json!({
            "meta": Value::Object(self.meta.clone()),
            "per_area": self.per_area,
            "per_group": self.per_group,
        })
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json())?;
                s.push('\n');
                Ok(s)
            }
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.csv.header)?;
                for row in &self.csv.rows {
                    w.write_record(row)?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
            }
        }
    }

    /// Writes to `out`, or to stdout when `out` is `None`.
    pub fn write(&self, format: OutputFormat, out: Option<&Path>) -> Result<()> {
        let text = self.render(format)?;
        match out {
            Some(path) => std::fs::write(path, text)?,
            None => std::io::stdout().write_all(text.as_bytes())?,
        }
        Ok(())
    }
}
