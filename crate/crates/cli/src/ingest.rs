//! Dataset files: CSV with a header row, or the JSON form of `RawDataset`.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use anyhow::{Context, Result};
use circe::{validate_dataset, Dataset, RawDataset};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Deserialize)]
pub enum DataFormat {
    Csv,
    Json,
}

/// A cell or header that could not be read. `row` counts data rows from 1;
/// `line` is the line in the file, header included.
#[derive(Debug, thiserror::Error)]
#[error("parse error at row {row} (line {line}), column {column}: {message}")]
pub struct ParseError {
    pub row: usize,
    pub line: usize,
    pub column: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
#[error("bad header: {0}")]
pub struct HeaderError(String);

enum Column {
    Y,
    H(usize),
    R,
    Group,
    GRef,
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let raw = match format {
        DataFormat::Csv => {
            let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            read_csv(file)?
        }
        DataFormat::Json => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str::<RawDataset>(&text).with_context(|| format!("invalid dataset JSON in {}", path.display()))?
        }
    };
    validate_dataset(raw).with_context(|| format!("invalid dataset in {}", path.display()))
}

/// Reads `y, h_1..h_p` plus optional `r`, `group` and `g_ref` columns in
/// any order. When `g_ref` is present the loaded response is `y - g_ref`.
pub fn read_csv<R: Read>(reader: R) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().context("cannot read CSV header")?.clone();

    let mut columns = Vec::with_capacity(headers.len());
    let mut p = 0;
    for name in headers.iter() {
        let col = match name {
            "y" => Column::Y,
            "r" => Column::R,
            "group" => Column::Group,
            "g_ref" => Column::GRef,
            other => match other.strip_prefix("h_").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => {
                    p = p.max(k);
                    Column::H(k - 1)
                }
                _ => return Err(HeaderError(format!("unknown column '{other}'")).into()),
            },
        };
        columns.push(col);
    }
    for required in ["y"].into_iter().map(String::from).chain((1..=p).map(|k| format!("h_{k}"))) {
        let count = headers.iter().filter(|h| *h == required).count();
        if count != 1 {
            return Err(HeaderError(format!("expected exactly one '{required}' column, found {count}")).into());
        }
    }
    if p == 0 {
        return Err(HeaderError("no h_1 column".into()).into());
    }
    for optional in ["r", "group", "g_ref"] {
        if headers.iter().filter(|h| *h == optional).count() > 1 {
            return Err(HeaderError(format!("duplicate '{optional}' column")).into());
        }
    }
    let has = |name: &str| headers.iter().any(|h| h == name);
    let (has_r, has_group) = (has("r"), has("group"));

    let mut y = Vec::new();
    let mut h = Vec::new();
    let mut r = Vec::new();
    let mut groups = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let line = row + 1;
        let record = record.with_context(|| format!("cannot read row {row} (line {line})"))?;
        if record.len() != columns.len() {
            return Err(ParseError {
                row,
                line,
                column: "*".into(),
                message: format!("expected {} fields, found {}", columns.len(), record.len()),
            }
            .into());
        }
        let mut yi = 0.0;
        let mut hi = vec![0.0; p];
        let mut ri = 0.0;
        let mut gi = 1;
        let mut gref = 0.0;
        for ((cell, col), name) in record.iter().zip(&columns).zip(headers.iter()) {
            let err = |message: String| ParseError {
                row,
                line,
                column: name.to_string(),
                message,
            };
            let number = || -> std::result::Result<f64, ParseError> {
                let v: f64 = cell.parse().map_err(|_| err(format!("'{cell}' is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("'{cell}' is not finite")))
                }
            };
            match col {
                Column::Y => yi = number()?,
                Column::H(j) => hi[*j] = number()?,
                Column::R => ri = number()?,
                Column::GRef => gref = number()?,
                Column::Group => {
                    gi = cell
                        .parse::<u32>()
                        .map_err(|_| err(format!("'{cell}' is not a non-negative integer label")))?
                }
            }
        }
        y.push(yi - gref);
        h.push(hi);
        r.push(ri);
        groups.push(gi);
    }
    Ok(RawDataset {
        y,
        h,
        r: has_r.then_some(r),
        groups: has_group.then_some(groups),
    })
}

/// Dataset CSV with columns `y, h_1..h_p, r, group`.
pub fn dataset_csv(d: &Dataset) -> String {
    use circe::synthetic::format_float;
    let mut out = String::from("y");
    for j in 1..=d.p() {
        out.push_str(&format!(",h_{j}"));
    }
    out.push_str(",r,group\n");
    let labels = d.labels();
    for i in 0..d.n() {
        out.push_str(&format_float(d.y()[i]));
        for &v in d.row(i) {
            out.push(',');
            out.push_str(&format_float(v));
        }
        out.push(',');
        out.push_str(&format_float(d.r()[i]));
        out.push_str(&format!(",{}\n", labels[i]));
    }
    out
}
