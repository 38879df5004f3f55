//! Sparse count matrices for bag-of-words corpora and pairwise
//! (row × item) data, with loaders, writers and deterministic splits.
//!
//! Two on-disk formats are supported:
//!
//! * **UCI bag-of-words**: three header lines holding the number of
//!   documents `D`, the vocabulary size `V` and the number of nonzero
//!   entries `NNZ`, followed by `NNZ` lines `docID termID count`. Indices
//!   are 1-based and fields are separated by whitespace.
//! * **TSV triplets**: lines `row<TAB>col<TAB>count`, 0-based. A first line
//!   whose fields are not all integers is treated as a header and skipped.
//!   Dimensions are one past the largest index unless given explicitly.
//!
//! Zero counts in either format are accepted and dropped, since zeros are
//! implicit. A repeated `(row, col)` pair is an error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DefError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    UciBow,
    Tsv,
}

impl std::str::FromStr for Format {
    type Err = DefError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uci" | "uci-bow" | "uci_bow" => Ok(Format::UciBow),
            "tsv" => Ok(Format::Tsv),
            other => Err(DefError::Config(format!("unknown data format {other:?}"))),
        }
    }
}

/// Row-compressed nonnegative integer matrix. Only positive counts are
/// stored; column indices within a row are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCounts {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col_names: Option<Vec<String>>,
}

impl SparseCounts {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparseCounts {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            cols: Vec::new(),
            counts: Vec::new(),
            col_names: None,
        }
    }

    /// Build from `(row, col, count)` triplets in any order. Zero counts are
    /// dropped; duplicates and out-of-range indices are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, u32)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(DefError::Data(format!(
                    "entry ({r}, {c}) outside a {n_rows} x {n_cols} matrix"
                )));
            }
        }
        if n_cols > u32::MAX as usize {
            return Err(DefError::Data(format!("{n_cols} columns is too many")));
        }
        triplets.retain(|t| t.2 > 0);
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(DefError::Data(format!(
                "duplicate entry at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0; n_rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseCounts {
            n_rows,
            n_cols,
            row_ptr,
            cols: triplets.iter().map(|t| t.1 as u32).collect(),
            counts: triplets.iter().map(|t| t.2).collect(),
            col_names: None,
        })
    }

    /// Dense row-major input, mostly for tests and fixtures.
    pub fn from_dense(rows: &[Vec<u32>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut trip = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(DefError::Data("ragged dense matrix".into()));
            }
            trip.extend(row.iter().enumerate().map(|(c, &v)| (r, c, v)));
        }
        Self::from_triplets(rows.len(), n_cols, trip)
    }

    pub fn with_col_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_cols {
            return Err(DefError::Data(format!(
                "{} names for {} columns",
                names.len(),
                self.n_cols
            )));
        }
        self.col_names = Some(names);
        Ok(self)
    }

    pub fn col_names(&self) -> Option<&[String]> {
        self.col_names.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    /// Column indices and counts of row `r`.
    pub fn row(&self, r: usize) -> (&[u32], &[u32]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.counts[a..b])
    }

    pub fn row_total(&self, r: usize) -> u64 {
        self.row(r).1.iter().map(|&c| c as u64).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        let (cols, counts) = self.row(r);
        match cols.binary_search(&(c as u32)) {
            Ok(i) => counts[i],
            Err(_) => 0,
        }
    }

    /// All stored entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, counts) = self.row(r);
            cols.iter()
                .zip(counts)
                .map(move |(&c, &v)| (r, c as usize, v))
        })
    }

    /// Column counts summed over rows.
    pub fn col_totals(&self) -> Vec<u64> {
        let mut t = vec![0u64; self.n_cols];
        for (&c, &v) in self.cols.iter().zip(&self.counts) {
            t[c as usize] += v as u64;
        }
        t
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut counts = Vec::new();
        for &r in rows {
            if r >= self.n_rows {
                return Err(DefError::Index(format!("row {r} of {}", self.n_rows)));
            }
            let (c, v) = self.row(r);
            cols.extend_from_slice(c);
            counts.extend_from_slice(v);
            row_ptr.push(cols.len());
        }
        Ok(SparseCounts {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_ptr,
            cols,
            counts,
            col_names: self.col_names.clone(),
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<u32>> {
        let mut d = vec![vec![0; self.n_cols]; self.n_rows];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DefError {
    DefError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load a count matrix in the given format.
pub fn load_bow(path: &Path, format: Format) -> Result<SparseCounts> {
    match format {
        Format::UciBow => load_uci(path),
        Format::Tsv => load_tsv(path, None),
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| DefError::io(path, e))?;
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn load_uci(path: &Path) -> Result<SparseCounts> {
    let mut lines = open_lines(path)?;
    let mut header = [0usize; 3];
    let names = ["document count", "vocabulary size", "nonzero count"];
    for (slot, name) in header.iter_mut().zip(names) {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing {name} header line")))?;
        let line = line.map_err(|e| DefError::io(path, e))?;
        *slot = line
            .trim()
            .parse()
            .map_err(|_| parse_err(path, no, format!("expected {name}, got {line:?}")))?;
    }
    let [d, v, nnz] = header;
    let mut trip = Vec::with_capacity(nnz);
    let mut seen = 0usize;
    for (no, line) in lines {
        let line = line.map_err(|e| DefError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(parse_err(
                path,
                no,
                format!("expected 3 fields, got {}", f.len()),
            ));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| parse_err(path, no, format!("not a nonnegative integer: {s:?}")))
        };
        let (doc, term, count) = (num(f[0])?, num(f[1])?, num(f[2])?);
        if doc == 0 || doc as usize > d {
            return Err(parse_err(
                path,
                no,
                format!("document id {doc} outside 1..={d}"),
            ));
        }
        if term == 0 || term as usize > v {
            return Err(parse_err(
                path,
                no,
                format!("term id {term} outside 1..={v}"),
            ));
        }
        let count = u32::try_from(count)
            .map_err(|_| parse_err(path, no, format!("count {count} too large")))?;
        seen += 1;
        trip.push((doc as usize - 1, term as usize - 1, count));
    }
    if seen != nnz {
        return Err(parse_err(
            path,
            3,
            format!("header declares {nnz} entries but file has {seen}"),
        ));
    }
    SparseCounts::from_triplets(d, v, trip)
}

/// Load TSV triplets. With `dims = None` the shape is inferred from the
/// largest indices present.
pub fn load_tsv(path: &Path, dims: Option<(usize, usize)>) -> Result<SparseCounts> {
    let mut trip = Vec::new();
    for (no, line) in open_lines(path)? {
        let line = line.map_err(|e| DefError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        let parsed: Option<Vec<u64>> = if f.len() == 3 {
            f.iter().map(|s| s.trim().parse().ok()).collect()
        } else {
            None
        };
        match parsed {
            Some(v) => {
                let count = u32::try_from(v[2])
                    .map_err(|_| parse_err(path, no, format!("count {} too large", v[2])))?;
                trip.push((v[0] as usize, v[1] as usize, count));
            }
            None if no == 1 => continue,
            None => {
                return Err(parse_err(
                    path,
                    no,
                    format!("expected row<TAB>col<TAB>count, got {line:?}"),
                ))
            }
        }
    }
    let (n_rows, n_cols) = match dims {
        Some(d) => d,
        None => (
            trip.iter().map(|t| t.0 + 1).max().unwrap_or(0),
            trip.iter().map(|t| t.1 + 1).max().unwrap_or(0),
        ),
    };
    SparseCounts::from_triplets(n_rows, n_cols, trip)
}

/// Optional vocabulary file: one term per line.
pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (_, line) in open_lines(path)? {
        out.push(line.map_err(|e| DefError::io(path, e))?.trim().to_string());
    }
    Ok(out)
}

pub fn write_bow(path: &Path, data: &SparseCounts, format: Format) -> Result<()> {
    let f = File::create(path).map_err(|e| DefError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| DefError::io(path, e);
    match format {
        Format::UciBow => {
            writeln!(w, "{}\n{}\n{}", data.n_rows, data.n_cols, data.nnz()).map_err(io)?;
            for (r, c, v) in data.triplets() {
                writeln!(w, "{} {} {}", r + 1, c + 1, v).map_err(io)?;
            }
        }
        Format::Tsv => {
            for (r, c, v) in data.triplets() {
                writeln!(w, "{r}\t{c}\t{v}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Disjoint, exhaustive partition of row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Shuffle rows with `seed` and cut them by `fractions` =
/// (train, validation, heldout). Each part is returned in ascending order.
pub fn split(n_rows: usize, fractions: [f64; 3], seed: u64) -> Result<RowSplit> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(DefError::Config(format!(
            "split fractions must be >= 0: {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DefError::Config(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let mut rows: Vec<usize> = (0..n_rows).collect();
    rows.shuffle(&mut rng::stream(seed));
    let n_train = (fractions[0] * n_rows as f64).round() as usize;
    let n_val = ((fractions[1] * n_rows as f64).round() as usize).min(n_rows - n_train);
    let mut train = rows[..n_train].to_vec();
    let mut validation = rows[n_train..n_train + n_val].to_vec();
    let mut heldout = rows[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    heldout.sort_unstable();
    Ok(RowSplit {
        train,
        validation,
        heldout,
    })
}

/// Observed cells plus explicitly sampled zero cells, for exporting
/// pairwise data to methods that need negative examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseCells {
    pub n_rows: usize,
    pub n_cols: usize,
    /// `(row, col, count)`; count 0 marks a sampled unobserved cell.
    pub cells: Vec<(usize, usize, u32)>,
}

impl PairwiseCells {
    pub fn n_zeros(&self) -> usize {
        self.cells.iter().filter(|c| c.2 == 0).count()
    }
}

/// Keep every observed cell and add each unobserved cell independently
/// with probability `rate`.
pub fn zero_subsample(data: &SparseCounts, rate: f64, seed: u64) -> Result<PairwiseCells> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DefError::Config(format!(
            "zero subsample rate {rate} outside [0, 1]"
        )));
    }
    let mut rng = rng::stream(seed);
    let mut cells = Vec::with_capacity(data.nnz());
    for r in 0..data.n_rows {
        let (cols, counts) = data.row(r);
        let mut next = 0;
        for c in 0..data.n_cols {
            if next < cols.len() && cols[next] as usize == c {
                cells.push((r, c, counts[next]));
                next += 1;
            } else if rate > 0.0 && rng.random::<f64>() < rate {
                cells.push((r, c, 0));
            }
        }
    }
    Ok(PairwiseCells {
        n_rows: data.n_rows,
        n_cols: data.n_cols,
        cells,
    })
}
