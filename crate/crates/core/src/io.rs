//! Plain-text serialization helpers.
//!
//! All numeric output uses Rust's shortest round-trip float formatting, so
//! artifacts are bit-stable across runs and `write` followed by `read` returns
//! the exact same values. Missing matrix entries are written as empty fields.

use crate::error::{Error, Result};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Writes a matrix as comma-delimited text, one row per line.
/// NaN entries become empty fields.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, matrix_text(m))?;
    Ok(())
}

/// Writes a matrix like [`write_matrix`] with a leading `# params_hash`
/// comment line, so the artifact records the configuration that produced
/// it. [`read_matrix`] skips comment lines.
pub fn write_matrix_tagged(path: &Path, m: &Array2<f64>, params_hash: &str) -> Result<()> {
    let mut out = format!("# params_hash {params_hash}\n");
    out.push_str(&matrix_text(m));
    fs::write(path, out)?;
    Ok(())
}

fn matrix_text(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for &v in row {
            if !first {
                out.push(',');
            }
            first = false;
            if v.is_nan() {
                // empty field marks a missing entry
            } else {
                write!(out, "{v}").expect("string write");
            }
        }
        out.push('\n');
    }
    out
}

/// Reads a matrix written by [`write_matrix`]. Empty fields become NaN.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let field = field.trim();
            if field.is_empty() {
                row.push(f64::NAN);
            } else {
                row.push(field.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("bad number {field:?}: {e}"),
                })?);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("empty matrix file".into()));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidData("ragged matrix file".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let nrows = flat.len() / ncols;
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::InvalidData(format!("matrix shape: {e}")))
}

/// Writes a key-value document, one `key,value` pair per line.
/// Keys keep their insertion order.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        writeln!(out, "{k},{v}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a key-value document written by [`write_kv`].
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected key,value but got {line:?}"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Looks up a key in a key-value document, erroring if absent.
pub fn kv_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Artifact(format!("missing key {key:?}")))
}

/// Joins floats with `;` using round-trip formatting.
pub fn join_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        if v.is_nan() {
            out.push_str("nan");
        } else {
            write!(out, "{v}").expect("string write");
        }
    }
    out
}

/// Inverse of [`join_floats`].
pub fn split_floats(text: &str) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|f| {
            let f = f.trim();
            if f == "nan" {
                Ok(f64::NAN)
            } else {
                f.parse::<f64>()
                    .map_err(|e| Error::Artifact(format!("bad float {f:?}: {e}")))
            }
        })
        .collect()
}

/// Short hex digest of a canonical parameter string. Used to stamp every
/// artifact with the configuration that produced it.
pub fn params_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().fold(String::new(), |mut acc, b| {
        write!(acc, "{b:02x}").expect("string write");
        acc
    })
}
