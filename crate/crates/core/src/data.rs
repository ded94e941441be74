//! Dataset containers, text loaders, and synthetic generators shared by the
//! fitters and the command-line runner.
//!
//! Two on-disk formats are supported: the sparse labeled format used by the
//! public Adult/a9a files ("±1 idx:val ..." with 1-based indices) and dense
//! whitespace-delimited matrices (one example per row).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Binary-labeled feature matrix. Labels are stored as {0, 1}.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("labeled dataset needs at least one example"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(LabeledDataset { features, labels })
    }

    /// Zero-example dataset of a given width; only the evidence-bound
    /// degenerate case uses this, fitters reject it.
    pub fn empty(dim: usize) -> Self {
        LabeledDataset {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Label as a ±1 sign.
    pub fn label_sign(&self, n: usize) -> f64 {
        if self.labels[n] == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Unlabeled feature matrix for the latent feature model.
#[derive(Debug, Clone)]
pub struct UnlabeledDataset {
    examples: Array2<f64>,
}

impl UnlabeledDataset {
    pub fn new(examples: Array2<f64>) -> Result<Self> {
        if examples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(UnlabeledDataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.ncols()
    }

    pub fn examples(&self) -> &Array2<f64> {
        &self.examples
    }

    /// Subtracts each column's mean; returns the centered data and the means.
    pub fn centered(&self) -> (UnlabeledDataset, Array1<f64>) {
        let n = self.examples.nrows().max(1) as f64;
        let means = self.examples.sum_axis(ndarray::Axis(0)) / n;
        let mut out = self.examples.clone();
        for mut row in out.rows_mut() {
            row -= &means;
        }
        (UnlabeledDataset { examples: out }, means)
    }

    /// Pooled standard deviation of all entries around the grand mean.
    pub fn pooled_std(&self) -> f64 {
        let total = (self.examples.len()).max(1) as f64;
        let mean = self.examples.iter().sum::<f64>() / total;
        let var = self.examples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / total;
        var.sqrt()
    }
}

fn parse_label(tok: &str, line_no: usize) -> Result<u8> {
    match tok {
        "+1" | "1" => Ok(1),
        "-1" | "0" => Ok(0),
        other => Err(Error::Parse(format!(
            "line {line_no}: label must be +1/-1/1/0, got {other:?}"
        ))),
    }
}

/// Reads the sparse labeled format: one example per line, a ±1 (or 0/1)
/// label followed by "index:value" pairs with 1-based indices. `num_features`
/// widens the matrix beyond the largest index seen (the a9a test split uses
/// fewer trailing features than the train split).
pub fn load_sparse_labeled(path: &Path, num_features: Option<usize>) -> Result<LabeledDataset> {
    let reader = BufReader::new(File::open(path)?);
    parse_sparse_labeled(reader, num_features)
}

pub fn parse_sparse_labeled<R: BufRead>(
    reader: R,
    num_features: Option<usize>,
) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let label_tok = toks.next().unwrap();
        labels.push(parse_label(label_tok, line_no)?);
        let mut row = Vec::new();
        for tok in toks {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| {
                Error::Parse(format!("line {line_no}: expected index:value, got {tok:?}"))
            })?;
            let idx: usize = idx_s.parse().map_err(|_| {
                Error::Parse(format!("line {line_no}: bad feature index {idx_s:?}"))
            })?;
            if idx == 0 {
                return Err(Error::Parse(format!(
                    "line {line_no}: feature indices are 1-based, got 0"
                )));
            }
            let val: f64 = val_s.parse().map_err(|_| {
                Error::Parse(format!("line {line_no}: bad feature value {val_s:?}"))
            })?;
            max_index = max_index.max(idx);
            row.push((idx - 1, val));
        }
        rows.push(row);
    }
    if labels.is_empty() {
        return Err(Error::Parse("no examples in input".into()));
    }
    let p = match num_features {
        Some(p) => {
            if p < max_index {
                return Err(Error::Parse(format!(
                    "declared {p} features but saw index {max_index}"
                )));
            }
            p
        }
        None => max_index,
    };
    let mut features = Array2::zeros((labels.len(), p));
    for (n, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            features[(n, j)] = v;
        }
    }
    LabeledDataset::new(features, labels)
}

/// Writes the sparse labeled format (1-based indices, zeros omitted),
/// inverse of `load_sparse_labeled` up to zero entries.
pub fn write_sparse_labeled(data: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for n in 0..data.len() {
        let lab = if data.labels()[n] == 1 { "+1" } else { "-1" };
        write!(w, "{lab}")?;
        for (j, &v) in data.features().row(n).iter().enumerate() {
            if v != 0.0 {
                write!(w, " {}:{}", j + 1, v)?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dense whitespace-delimited matrix, one example per row.
pub fn load_dense_matrix(path: &Path) -> Result<UnlabeledDataset> {
    let reader = BufReader::new(File::open(path)?);
    parse_dense_matrix(reader)
}

pub fn parse_dense_matrix<R: BufRead>(reader: R) -> Result<UnlabeledDataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row: Vec<f64> = trimmed
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {line_no}: bad number {t:?}")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!(
                    "line {line_no}: expected {w} columns, got {}",
                    row.len()
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no examples in input".into()));
    }
    let p = width.unwrap();
    let mut m = Array2::zeros((rows.len(), p));
    for (n, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(n, j)] = v;
        }
    }
    UnlabeledDataset::new(m)
}

pub fn write_dense_matrix(data: &UnlabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in data.examples().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Side length of the block-image grid.
pub const BLOCKS_GRID: usize = 6;
/// Number of shape templates.
pub const BLOCKS_SHAPES: usize = 4;

/// The four binary shape templates on the 6×6 grid, one per quadrant-ish
/// region: square outline, plus sign, X, and T.
pub fn blocks_templates() -> Array2<f64> {
    let d = BLOCKS_GRID * BLOCKS_GRID;
    let mut t = Array2::zeros((BLOCKS_SHAPES, d));
    let at = |r: usize, c: usize| r * BLOCKS_GRID + c;
    // square outline in rows 0-2, cols 0-2
    for &(r, c) in &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)] {
        t[(0, at(r, c))] = 1.0;
    }
    // plus sign in rows 0-2, cols 3-5
    for &(r, c) in &[(0, 4), (1, 3), (1, 4), (1, 5), (2, 4)] {
        t[(1, at(r, c))] = 1.0;
    }
    // X in rows 3-5, cols 0-2
    for &(r, c) in &[(3, 0), (3, 2), (4, 1), (5, 0), (5, 2)] {
        t[(2, at(r, c))] = 1.0;
    }
    // T in rows 3-5, cols 3-5
    for &(r, c) in &[(3, 3), (3, 4), (3, 5), (4, 4), (5, 4)] {
        t[(3, at(r, c))] = 1.0;
    }
    t
}

/// Noisy superpositions of the four templates, each present independently
/// with probability 1/2, plus iid Gaussian noise. Returns the data, the
/// templates, and the presence matrix.
pub fn generate_blocks<R: Rng + ?Sized>(
    n: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> (UnlabeledDataset, Array2<f64>, Array2<u8>) {
    assert!(n >= 1);
    assert!(noise_sigma >= 0.0);
    let templates = blocks_templates();
    let d = templates.ncols();
    let mut x = Array2::zeros((n, d));
    let mut present = Array2::zeros((n, BLOCKS_SHAPES));
    for i in 0..n {
        for k in 0..BLOCKS_SHAPES {
            if rng.gen::<f64>() < 0.5 {
                present[(i, k)] = 1u8;
                for j in 0..d {
                    x[(i, j)] += templates[(k, j)];
                }
            }
        }
        if noise_sigma > 0.0 {
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                x[(i, j)] += noise_sigma * e;
            }
        }
    }
    (UnlabeledDataset::new(x).unwrap(), templates, present)
}
