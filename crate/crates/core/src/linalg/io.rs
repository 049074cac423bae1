//! Plain-text matrix interchange.
//!
//! ```text
//! 2 3
//! 1.0 0.5 -2.0
//! 0.0 3.25 1e-20
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so parsing the
//! output reproduces every bit of the input.

use std::fmt::Write as _;
use std::path::Path;

use super::DenseMatrix;
use crate::error::{Result, SodaError};

pub fn format_matrix(m: &DenseMatrix) -> String {
    let mut out = String::new();
    write_matrix_into(&mut out, m);
    out
}

pub(crate) fn write_matrix_into(out: &mut String, m: &DenseMatrix) {
    let _ = writeln!(out, "{} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines().enumerate();
    let m = parse_matrix_lines(&mut lines, 0)?;
    for (idx, line) in lines {
        if !line.trim().is_empty() {
            return Err(SodaError::Parse {
                line: idx + 1,
                detail: "unexpected trailing content".into(),
            });
        }
    }
    Ok(m)
}

/// Reads one matrix from an enumerated line iterator. `offset` is added to
/// reported line numbers so embedded matrices point at the enclosing file.
pub(crate) fn parse_matrix_lines<'a, I>(lines: &mut I, offset: usize) -> Result<DenseMatrix>
where
    I: Iterator<Item = (usize, &'a str)>,
{
    let (hidx, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or(SodaError::Parse {
            line: offset + 1,
            detail: "missing `rows cols` header".into(),
        })?;
    let hline = offset + hidx + 1;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| {
        s.parse::<usize>().ok().filter(|&d| d > 0).ok_or(SodaError::Parse {
            line: hline,
            detail: format!("invalid dimension `{s}`"),
        })
    };
    if dims.len() != 2 {
        return Err(SodaError::Parse {
            line: hline,
            detail: format!("header must be `rows cols`, got `{}`", header.trim()),
        });
    }
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;

    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (idx, line) = lines.next().ok_or(SodaError::Parse {
            line: hline + r + 1,
            detail: format!("expected {rows} rows, found {r}"),
        })?;
        let lno = offset + idx + 1;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| SodaError::Parse {
                line: lno,
                detail: format!("invalid number `{tok}`"),
            })?;
            if !v.is_finite() {
                return Err(SodaError::Parse {
                    line: lno,
                    detail: format!("non-finite value `{tok}`"),
                });
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(SodaError::Parse {
                line: lno,
                detail: format!("expected {cols} values, found {}", data.len() - before),
            });
        }
    }
    DenseMatrix::new(rows, cols, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| SodaError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_matrix(&text)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    std::fs::write(path.as_ref(), format_matrix(m))
        .map_err(|e| SodaError::Io(format!("{}: {e}", path.as_ref().display())))
}
