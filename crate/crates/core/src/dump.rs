//! Comma-separated logit/probability dumps and label files.
//!
//! A dump is a header `class_0,...,class_{C-1}` followed by one row of `C`
//! decimal reals per sample, every line newline-terminated. A label file has
//! one base-10 integer per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::probvec::LogitVector;

/// Significant digits used when writing probabilities.
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("length mismatch: {rows} logit rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> DumpError {
    DumpError::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, DumpError> {
    fs::read_to_string(path).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn header(classes: usize) -> String {
    (0..classes)
        .map(|i| format!("class_{i}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses dump text; `path` is only used in error messages.
pub fn parse_logits(text: &str, path: &Path) -> Result<Vec<LogitVector>, DumpError> {
    if text.is_empty() {
        return Err(format_err(path, 1, "empty file, expected a header line"));
    }
    if !text.ends_with('\n') {
        let last = text.lines().count();
        return Err(format_err(path, last, "missing final newline"));
    }
    let mut lines = text.lines();
    let head = lines.next().unwrap_or_default();
    let classes = head.split(',').count();
    if classes < 2 || head != header(classes) {
        return Err(format_err(
            path,
            1,
            format!("expected header of the form class_0,...,class_{{C-1}} with C >= 2, got {head:?}"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != classes {
            return Err(format_err(
                path,
                lineno,
                format!("expected {classes} values, found {}", fields.len()),
            ));
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        format_err(path, lineno, format!("column {col}: {f:?} is not a finite real"))
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(LogitVector::new(values).expect("checked finite and C >= 2"));
    }
    Ok(rows)
}

pub fn read_logits(path: &Path) -> Result<Vec<LogitVector>, DumpError> {
    parse_logits(&read(path)?, path)
}

/// Parses label text. Every label must be below `classes`.
pub fn parse_labels(text: &str, path: &Path, classes: usize) -> Result<Vec<usize>, DumpError> {
    if !text.is_empty() && !text.ends_with('\n') {
        let last = text.lines().count();
        return Err(format_err(path, last, "missing final newline"));
    }
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let lineno = i + 1;
            let label: usize = line
                .parse()
                .map_err(|_| format_err(path, lineno, format!("{line:?} is not a base-10 label")))?;
            if label >= classes {
                return Err(format_err(
                    path,
                    lineno,
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
            Ok(label)
        })
        .collect()
}

pub fn read_labels(path: &Path, classes: usize) -> Result<Vec<usize>, DumpError> {
    parse_labels(&read(path)?, path, classes)
}

/// Reads a dump and its label file and checks that they pair up.
pub fn read_pair(
    logits: &Path,
    labels: &Path,
) -> Result<(Vec<LogitVector>, Vec<usize>), DumpError> {
    let rows = read_logits(logits)?;
    let classes = rows.first().map_or(usize::MAX, LogitVector::len);
    let labels = read_labels(labels, classes)?;
    if rows.len() != labels.len() {
        return Err(DumpError::LengthMismatch {
            rows: rows.len(),
            labels: labels.len(),
        });
    }
    Ok((rows, labels))
}

/// Rounds to [`SIGNIFICANT_DIGITS`] and prints the shortest decimal that
/// reads back as the rounded value.
pub fn format_value(v: f64) -> String {
    let rounded: f64 = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v)
        .parse()
        .expect("formatted float parses");
    format!("{rounded}")
}

pub fn render_rows<R: AsRef<[f64]>>(rows: &[R]) -> String {
    let classes = rows.first().map_or(0, |r| r.as_ref().len());
    let mut out = header(classes);
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.as_ref().iter().map(|&v| format_value(v)).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn write_rows<R: AsRef<[f64]>>(path: &Path, rows: &[R]) -> Result<(), DumpError> {
    fs::write(path, render_rows(rows)).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn render_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}
