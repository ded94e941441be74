//! Evaluation metrics: clustering agreement, retrieval precision, and
//! per-pattern accuracy reports.
//!
//! Clustering quality is scored two ways: accuracy under the best one-to-one
//! matching between predicted clusters and reference classes, and normalized
//! mutual information. Retrieval quality is precision at k under Euclidean
//! distance. The per-pattern report breaks accuracy down by an externally
//! supplied grouping (for instance, category or frequency bucket) and attaches
//! the relative improvement of one run over another.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema version stamped into emitted reports so downstream consumers can
/// detect layout changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A pair of label sequences over the same items: a predicted clustering and a
/// reference partition. Labels are arbitrary non-negative integers; they are
/// compacted internally, so gaps are fine.
#[derive(Debug, Clone)]
pub struct ClusteringResult {
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

impl ClusteringResult {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        if predicted.is_empty() {
            return Err(Error::invalid("clustering result needs at least one item"));
        }
        Ok(ClusteringResult { predicted, truth })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }
}

/// Clustering agreement scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    /// Fraction of items placed correctly under the best one-to-one assignment
    /// of predicted clusters to reference classes.
    pub accuracy: f64,
    /// Mutual information between the two partitions, normalized by the
    /// geometric mean of their entropies. Zero when either partition is
    /// constant (the 0/0 case is defined as 0).
    pub nmi: f64,
}

/// Score a predicted clustering against a reference partition.
///
/// Accuracy maximizes the total contingency count over one-to-one
/// cluster-to-class assignments, so it is invariant to relabeling either side.
/// Both scores lie in [0, 1].
pub fn clustering_metrics(result: &ClusteringResult) -> ClusteringMetrics {
    let (counts, _, _) = contingency(result.predicted(), result.truth());
    let n = result.len() as f64;
    let matched = assignment_max_total(&counts);
    let accuracy = matched / n;
    let nmi = normalized_mutual_information(&counts, n);
    ClusteringMetrics { accuracy, nmi }
}

/// Contingency table between two label sequences, with the compaction maps
/// from raw label to row/column index.
fn contingency(a: &[usize], b: &[usize]) -> (Array2<f64>, BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let mut rows = BTreeMap::new();
    let mut cols = BTreeMap::new();
    for &x in a {
        let next = rows.len();
        rows.entry(x).or_insert(next);
    }
    for &y in b {
        let next = cols.len();
        cols.entry(y).or_insert(next);
    }
    let mut counts = Array2::zeros((rows.len(), cols.len()));
    for (&x, &y) in a.iter().zip(b) {
        counts[[rows[&x], cols[&y]]] += 1.0;
    }
    (counts, rows, cols)
}

fn normalized_mutual_information(counts: &Array2<f64>, n: f64) -> f64 {
    let row_sums: Vec<f64> = counts.rows().into_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = counts.columns().into_iter().map(|c| c.sum()).collect();
    let mut info = 0.0;
    for (i, row) in counts.rows().into_iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / n;
                info += p * (p * n * n / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    let h = |sums: &[f64]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / n;
                -p * p.ln()
            })
            .sum()
    };
    let hp = h(&row_sums);
    let ht = h(&col_sums);
    if hp <= 0.0 || ht <= 0.0 {
        // A constant partition carries no information; 0/0 is defined as 0.
        return 0.0;
    }
    (info / (hp * ht).sqrt()).clamp(0.0, 1.0)
}

/// Maximum total score over one-to-one assignments of rows to columns.
///
/// Scores must be non-negative. Rectangular inputs are padded with zero rows
/// or columns, so unmatched clusters simply contribute nothing.
pub fn assignment_max_total(scores: &Array2<f64>) -> f64 {
    let n = scores.nrows().max(scores.ncols());
    if n == 0 {
        return 0.0;
    }
    // Shortest-augmenting-path assignment with row/column potentials, on the
    // negated scores so the minimum-cost solution is the maximum-score one.
    // Indices are offset by one; slot 0 is the virtual unmatched column.
    let cost = |i: usize, j: usize| -> f64 {
        if i < scores.nrows() && j < scores.ncols() {
            -scores[[i, j]]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        let i = matched_row[j];
        if i >= 1 {
            total -= cost(i - 1, j - 1);
        }
    }
    total
}

/// Per-query and averaged precision at k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub per_query: Vec<f64>,
    pub mean: f64,
    pub k: usize,
}

/// For each query, retrieve the `k` nearest corpus items under Euclidean
/// distance and report the fraction whose label matches the query's.
///
/// Distance ties are broken by corpus index, lowest first, so the result is
/// deterministic. `k` must be between 1 and the corpus size.
pub fn precision_at_k(
    query_reprs: ArrayView2<f64>,
    corpus_reprs: ArrayView2<f64>,
    query_labels: &[usize],
    corpus_labels: &[usize],
    k: usize,
) -> Result<PrecisionAtK> {
    let m = corpus_reprs.nrows();
    if k == 0 || k > m {
        return Err(Error::invalid(format!(
            "k must be in 1..={m}, got {k}"
        )));
    }
    if query_reprs.nrows() != query_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: query_reprs.nrows(),
            got: query_labels.len(),
        });
    }
    if m != corpus_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: corpus_labels.len(),
        });
    }
    if query_reprs.ncols() != corpus_reprs.ncols() {
        return Err(Error::DimensionMismatch {
            expected: corpus_reprs.ncols(),
            got: query_reprs.ncols(),
        });
    }
    if query_reprs.nrows() == 0 {
        return Err(Error::invalid("precision needs at least one query"));
    }
    let mut per_query = Vec::with_capacity(query_reprs.nrows());
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (q, query) in query_reprs.rows().into_iter().enumerate() {
        let dists: Vec<f64> = corpus_reprs
            .rows()
            .into_iter()
            .map(|row| squared_distance(query, row))
            .collect();
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        let hits = order[..k]
            .iter()
            .filter(|&&j| corpus_labels[j] == query_labels[q])
            .count();
        per_query.push(hits as f64 / k as f64);
    }
    let mean = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(PrecisionAtK { per_query, mean, k })
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relative improvement of `candidate` over `baseline`, in percent.
///
/// Returns `None` when the baseline is zero, where the ratio is undefined.
/// The value is the exact formula (candidate - baseline) / baseline * 100;
/// published summaries of this ratio are easy to get wrong, so callers should
/// trust the computed number over any transcribed one.
pub fn relative_improvement(baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((candidate - baseline) / baseline * 100.0)
    }
}

/// One row of a per-pattern accuracy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReportRow {
    pub pattern: usize,
    /// Externally supplied frequency for the pattern (for example, training
    /// document count), used only for ordering and display.
    pub frequency: usize,
    pub baseline_accuracy: f64,
    pub candidate_accuracy: f64,
    /// Percent improvement of candidate over baseline; `None` when the
    /// baseline accuracy is zero.
    pub improvement_percent: Option<f64>,
}

/// A versioned per-pattern comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternReport {
    pub schema_version: u32,
    /// Rows sorted by descending frequency, ties by pattern id.
    pub rows: Vec<PatternReportRow>,
}

/// Accuracy per pattern from item-level correctness flags.
pub fn pattern_accuracy(correct: &[bool], pattern_ids: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if correct.len() != pattern_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: pattern_ids.len(),
            got: correct.len(),
        });
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&ok, &p) in correct.iter().zip(pattern_ids) {
        let entry = hits.entry(p).or_insert((0, 0));
        entry.1 += 1;
        if ok {
            entry.0 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(p, (h, n))| (p, h as f64 / n as f64))
        .collect())
}

/// Compare two aligned runs pattern by pattern.
///
/// Both correctness vectors must be item-aligned with `pattern_ids`, and every
/// pattern that occurs must have an entry in `pattern_frequencies`. Rows come
/// back sorted by descending frequency so the most common patterns lead.
pub fn per_pattern_report(
    baseline_correct: &[bool],
    candidate_correct: &[bool],
    pattern_ids: &[usize],
    pattern_frequencies: &BTreeMap<usize, usize>,
) -> Result<PatternReport> {
    if baseline_correct.len() != candidate_correct.len() {
        return Err(Error::DimensionMismatch {
            expected: baseline_correct.len(),
            got: candidate_correct.len(),
        });
    }
    let base = pattern_accuracy(baseline_correct, pattern_ids)?;
    let cand = pattern_accuracy(candidate_correct, pattern_ids)?;
    let mut rows = Vec::with_capacity(base.len());
    for (&pattern, &baseline_accuracy) in &base {
        let frequency = *pattern_frequencies.get(&pattern).ok_or_else(|| {
            Error::invalid(format!("pattern {pattern} has no frequency entry"))
        })?;
        let candidate_accuracy = cand[&pattern];
        rows.push(PatternReportRow {
            pattern,
            frequency,
            baseline_accuracy,
            candidate_accuracy,
            improvement_percent: relative_improvement(baseline_accuracy, candidate_accuracy),
        });
    }
    rows.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.pattern.cmp(&b.pattern)));
    Ok(PatternReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
    })
}

impl PatternReport {
    /// Serialize the report as JSON, schema version included.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))
    }

    /// Serialize the report as CSV. The first line records the schema version
    /// as a comment so the layout stays self-describing.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema_version={}\n", self.schema_version);
        out.push_str("pattern,frequency,baseline_accuracy,candidate_accuracy,improvement_percent\n");
        for row in &self.rows {
            let imp = row
                .improvement_percent
                .map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.pattern, row.frequency, row.baseline_accuracy, row.candidate_accuracy, imp
            ));
        }
        out
    }
}

/// Cluster rows of `points` into `k` groups with Lloyd's algorithm, keeping
/// the best of `restarts` random initializations by within-cluster squared
/// error. Deterministic for a fixed seed.
pub fn kmeans_labels(
    points: ArrayView2<f64>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cluster count must be in 1..={n}, got {k}"
        )));
    }
    if restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let (sse, labels) = lloyd_once(points, k, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| sse < *b) {
            best = Some((sse, labels));
        }
    }
    Ok(best.unwrap().1)
}

fn lloyd_once<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> (f64, Vec<usize>) {
    let n = points.nrows();
    let d = points.ncols();
    let mut centers = Array2::zeros((k, d));
    for (c, i) in sample_indices(rng, n, k).into_iter().enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }
    let mut labels = vec![0usize; n];
    let mut sse = 0.0;
    for _ in 0..200 {
        // Assign each point to its nearest center.
        sse = 0.0;
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.rows().into_iter().enumerate() {
                let dist = squared_distance(p, center);
                if dist < best_d {
                    best_d = dist;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
            sse += best_d;
        }
        // Rebuild centers; an emptied cluster grabs the point farthest from
        // its own center so k survives.
        let mut counts = vec![0usize; k];
        let mut sums = Array2::zeros((k, d));
        for (i, p) in points.rows().into_iter().enumerate() {
            counts[labels[i]] += 1;
            let mut row = sums.row_mut(labels[i]);
            row += &p;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        squared_distance(points.row(a), centers.row(labels[a]))
                            .total_cmp(&squared_distance(points.row(b), centers.row(labels[b])))
                    })
                    .unwrap();
                centers.row_mut(c).assign(&points.row(far));
                changed = true;
            } else {
                let mut row = centers.row_mut(c);
                row.assign(&sums.row(c));
                row /= counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    (sse, labels)
}
