//! Sparse rows and the plain-text matrix format shared by features and labels.
//!
//! ```text
//! 3 28
//! 0:1 1:0.5 2:0.25 20:1
//!
//! 1:0.75 7:1
//! ```
//!
//! The first line is `n_rows n_cols`; each following line is one row of
//! space-separated `index:value` pairs with strictly increasing indices. An
//! empty line is an all-zero row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sparse vector holding only its nonzero entries, sorted by index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: u32,
    pub entries: Vec<(u32, f32)>,
}

impl SparseVec {
    pub fn zeros(dim: u32) -> Self {
        SparseVec {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds from arbitrary pairs: sorts, drops zeros, rejects duplicates and out-of-range indices.
    pub fn from_pairs(dim: u32, mut pairs: Vec<(u32, f32)>) -> Result<Self> {
        pairs.retain(|&(_, v)| v != 0.0);
        pairs.sort_by_key(|&(i, _)| i);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidParameter(format!("duplicate index {}", w[0].0)));
            }
        }
        if let Some(&(i, _)) = pairs.last() {
            if i >= dim {
                return Err(Error::DimensionMismatch(format!("index {i} outside dimension {dim}")));
            }
        }
        if let Some(&(i, v)) = pairs.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value {v} at index {i}")));
        }
        Ok(SparseVec { dim, entries: pairs })
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u32) -> f32 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn l2_norm(&self) -> f32 {
        self.entries.iter().map(|&(_, v)| v * v).sum::<f32>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.dim as usize];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// Row-major sparse matrix with a fixed column count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub n_cols: u32,
    pub rows: Vec<SparseVec>,
}

impl SparseMatrix {
    pub fn new(n_cols: u32) -> Self {
        SparseMatrix {
            n_cols,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(n_cols: u32, rows: Vec<SparseVec>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.dim != n_cols) {
            return Err(Error::DimensionMismatch(format!(
                "row of dimension {} in a matrix with {n_cols} columns",
                r.dim
            )));
        }
        Ok(SparseMatrix { n_cols, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseVec::nnz).sum()
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{} {}", self.rows.len(), self.n_cols)?;
        for row in &self.rows {
            let mut first = true;
            for &(i, v) in &row.entries {
                if !first {
                    w.write_all(b" ")?;
                }
                write!(w, "{i}:{v}")?;
                first = false;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        Self::read_from(reader, path)
    }

    pub fn read_from(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "missing header"))??;
        let mut parts = header.split_whitespace();
        let parse_dim = |s: Option<&str>| -> Result<usize> {
            s.and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::parse(path, 1, "header must be `n_rows n_cols`"))
        };
        let n_rows = parse_dim(parts.next())?;
        let n_cols = parse_dim(parts.next())? as u32;
        if parts.next().is_some() {
            return Err(Error::parse(path, 1, "header must be `n_rows n_cols`"));
        }

        let mut rows = Vec::with_capacity(n_rows);
        for (k, line) in lines.enumerate() {
            let line_no = k as u64 + 2;
            let line = line?;
            if rows.len() == n_rows {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::parse(path, line_no, "more rows than declared"));
            }
            let mut entries = Vec::new();
            for tok in line.split_whitespace() {
                let (i, v) = tok
                    .split_once(':')
                    .ok_or_else(|| Error::parse(path, line_no, format!("expected index:value, got `{tok}`")))?;
                let i: u32 = i
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad index `{i}`")))?;
                let v: f32 = v
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("bad value `{v}`")))?;
                if i >= n_cols {
                    return Err(Error::parse(path, line_no, format!("index {i} >= {n_cols}")));
                }
                if let Some(&(prev, _)) = entries.last() {
                    if i <= prev {
                        return Err(Error::parse(path, line_no, "indices must be strictly increasing"));
                    }
                }
                if v != 0.0 {
                    entries.push((i, v));
                }
            }
            rows.push(SparseVec { dim: n_cols, entries });
        }
        if rows.len() != n_rows {
            return Err(Error::parse(
                path,
                rows.len() as u64 + 2,
                format!("declared {n_rows} rows, found {}", rows.len()),
            ));
        }
        Ok(SparseMatrix { n_cols, rows })
    }
}

/// Writes one id per line; the sidecar of a sparse matrix.
pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            ids.push(t.to_string());
        }
    }
    Ok(ids)
}
