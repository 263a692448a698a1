//! Multiclass datasets in libsvm text format (`label idx:val idx:val ...`,
//! indices 1-based, missing entries zero).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::quadgrad::LrDataset;

const IRIS: &str = include_str!("../data/iris.libsvm");
const WINE: &str = include_str!("../data/wine.libsvm");

/// Raw rows before normalisation: labels and a dense `n x (1+d)` matrix with
/// the leading ones column.
pub fn parse_libsvm_raw(text: &str) -> Result<(Vec<i64>, Matrix)> {
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut d = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let raw = fields.next().unwrap_or_default();
        let label: f64 = raw.parse().map_err(|_| err(format!("bad label {raw:?}")))?;
        if label.fract() != 0.0 {
            return Err(err(format!("label {raw:?} is not an integer")));
        }
        labels.push(label as i64);
        let mut entries = Vec::new();
        for field in fields {
            let (idx, val) = field
                .split_once(':')
                .ok_or_else(|| err(format!("expected idx:val, got {field:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("bad index {idx:?}")))?;
            if idx == 0 {
                return Err(err("feature indices start at 1".into()));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("bad value {val:?}")))?;
            d = d.max(idx);
            entries.push((idx, val));
        }
        rows.push(entries);
    }
    let mut x = Matrix::zeros(rows.len(), 1 + d);
    for (i, entries) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for &(idx, val) in entries {
            x[(i, idx)] = val;
        }
    }
    Ok((labels, x))
}

/// Parses, min-max normalises every feature column into [0, 1] (constant
/// columns become 0) and maps the distinct raw labels, sorted, to `0..c`.
pub fn parse_libsvm(text: &str, classes: usize) -> Result<LrDataset> {
    let (raw, mut x) = parse_libsvm_raw(text)?;
    for j in 1..x.cols() {
        let (lo, hi) = (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(x[(i, j)]), hi.max(x[(i, j)]))
        });
        let span = hi - lo;
        for i in 0..x.rows() {
            x[(i, j)] = if span > 0.0 {
                (x[(i, j)] - lo) / span
            } else {
                0.0
            };
        }
    }
    let mut distinct = raw.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if let Some(&label) = distinct.get(classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let y = raw
        .iter()
        .map(|l| {
            distinct
                .binary_search(l)
                .expect("label came from the same list")
        })
        .collect();
    LrDataset::new(x, y, classes)
}

pub fn load_libsvm(path: impl AsRef<Path>, classes: usize) -> Result<LrDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_libsvm(&fs::read_to_string(path)?, classes)
}

/// Bundled iris data: 150 records, 4 features, 3 classes.
pub fn iris() -> LrDataset {
    parse_libsvm(IRIS, 3).expect("bundled iris parses")
}

/// Bundled wine data: 178 records, 13 features, 3 classes.
pub fn wine() -> LrDataset {
    parse_libsvm(WINE, 3).expect("bundled wine parses")
}
