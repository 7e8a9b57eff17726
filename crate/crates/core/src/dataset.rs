//! In-memory model of a multi-annotator classification dataset.
//!
//! Examples, annotators and classes are dense zero-based indices. String ids
//! and class names are translated at the I/O boundary (see [`crate::io`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clamp applied to every ingested class probability.
pub const PROB_EPSILON: f64 = 1e-6;

/// Tolerance on a probability row summing to one at ingestion time.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// One label given by one annotator to one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub example: usize,
    pub annotator: usize,
    pub label: usize,
}

impl Annotation {
    pub fn new(example: usize, annotator: usize, label: usize) -> Self {
        Self {
            example,
            annotator,
            label,
        }
    }
}

/// Sparse record of which annotator gave which class to which example.
///
/// Construction only rejects entries whose example or annotator index falls
/// outside the declared dimensions. Everything else (duplicates, labels
/// outside `[0, K)`, unannotated examples, annotators with a single label) is
/// surfaced by [`validate`] so callers can decide what to do with it.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    num_examples: usize,
    num_classes: usize,
    num_annotators: usize,
    entries: Vec<Annotation>,
    /// `(annotator, label)` pairs per example, sorted by annotator.
    by_example: Vec<Vec<(usize, usize)>>,
    /// `(example, label)` pairs per annotator, sorted by example.
    by_annotator: Vec<Vec<(usize, usize)>>,
}

impl AnnotationTable {
    pub fn new(
        num_examples: usize,
        num_classes: usize,
        num_annotators: usize,
        entries: Vec<Annotation>,
    ) -> Result<Self> {
        let mut by_example = vec![Vec::new(); num_examples];
        let mut by_annotator = vec![Vec::new(); num_annotators];
        for a in &entries {
            if a.example >= num_examples {
                return Err(Error::input(format!(
                    "example index {} out of range for {} examples",
                    a.example, num_examples
                )));
            }
            if a.annotator >= num_annotators {
                return Err(Error::input(format!(
                    "annotator index {} out of range for {} annotators",
                    a.annotator, num_annotators
                )));
            }
            by_example[a.example].push((a.annotator, a.label));
            by_annotator[a.annotator].push((a.example, a.label));
        }
        for row in by_example.iter_mut().chain(by_annotator.iter_mut()) {
            row.sort_unstable();
        }
        Ok(Self {
            num_examples,
            num_classes,
            num_annotators,
            entries,
            by_example,
            by_annotator,
        })
    }

    /// Builds a table whose dimensions are inferred from the entries:
    /// `n` and `m` from the largest indices, `K` from the largest label
    /// unless `num_classes` is given.
    pub fn from_entries(num_classes: Option<usize>, entries: Vec<Annotation>) -> Result<Self> {
        let n = entries.iter().map(|a| a.example + 1).max().unwrap_or(0);
        let m = entries.iter().map(|a| a.annotator + 1).max().unwrap_or(0);
        let observed_k = entries.iter().map(|a| a.label + 1).max().unwrap_or(0);
        let k = num_classes.unwrap_or(observed_k);
        Self::new(n, k, m, entries)
    }

    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_annotations(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Annotation] {
        &self.entries
    }

    /// `(annotator, label)` pairs for example `i` (the set 𝒥ᵢ with labels).
    pub fn example_annotations(&self, example: usize) -> &[(usize, usize)] {
        &self.by_example[example]
    }

    /// `(example, label)` pairs for annotator `j` (the set ℐⱼ with labels).
    pub fn annotator_labels(&self, annotator: usize) -> &[(usize, usize)] {
        &self.by_annotator[annotator]
    }

    pub fn annotation_count(&self, example: usize) -> usize {
        self.by_example[example].len()
    }

    /// Whether example `i` belongs to ℐ₊ (more than one annotation).
    pub fn is_multi_annotated(&self, example: usize) -> bool {
        self.by_example[example].len() > 1
    }

    pub fn num_multi_annotated(&self) -> usize {
        (0..self.num_examples)
            .filter(|&i| self.is_multi_annotated(i))
            .count()
    }

    /// Number of annotations per class over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for a in &self.entries {
            if a.label < self.num_classes {
                counts[a.label] += 1;
            }
        }
        counts
    }

    /// Empirical marginal distribution of all given labels.
    pub fn label_marginal(&self) -> Vec<f64> {
        let counts = self.class_counts();
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![1.0 / self.num_classes as f64; self.num_classes];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// Mean number of annotations per example, (1/n) Σᵢ |𝒥ᵢ|.
    pub fn mean_annotations_per_example(&self) -> f64 {
        if self.num_examples == 0 {
            return 0.0;
        }
        self.entries.len() as f64 / self.num_examples as f64
    }

    /// Returns a copy of this table with one more annotator who labels
    /// every example with the given label.
    pub fn with_extra_annotator(&self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.num_examples {
            return Err(Error::input(format!(
                "expected {} labels for the extra annotator, got {}",
                self.num_examples,
                labels.len()
            )));
        }
        let new_annotator = self.num_annotators;
        let mut entries = self.entries.clone();
        entries.extend(
            labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Annotation::new(i, new_annotator, label)),
        );
        Self::new(
            self.num_examples,
            self.num_classes,
            self.num_annotators + 1,
            entries,
        )
    }

    /// Fails with the first error-severity violation reported by [`validate`].
    pub fn ensure_valid(&self) -> Result<()> {
        let summary = validate(self, None);
        match summary.first_error() {
            Some(v) => Err(Error::input(v.to_string())),
            None => Ok(()),
        }
    }
}

/// n×K matrix of classifier-predicted class probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    /// Ingests probability rows.
    ///
    /// Every value must lie in `[0, 1]` and every row must sum to one within
    /// [`ROW_SUM_TOLERANCE`]. Rows off by more than 1e-12 are renormalized.
    /// Rows with any value outside `[ε, 1−ε]` are mapped through
    /// `p ↦ (1 − Kε)·p + ε`, which keeps the row sum at one and bounds every
    /// entry to `[ε, 1 − ε]`. Rows already inside the bounds are stored
    /// bit-for-bit.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::input(format!(
                    "probability row {} has {} columns, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            values.extend_from_slice(row);
        }
        Self::from_flat(rows.len(), cols, values)
    }

    pub fn from_flat(rows: usize, cols: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::input(format!(
                "expected {}x{} probabilities, got {} values",
                rows,
                cols,
                values.len()
            )));
        }
        if cols < 2 && rows > 0 {
            return Err(Error::input("probabilities need at least two classes"));
        }
        for (i, row) in values.chunks_mut(cols.max(1)).enumerate() {
            normalize_row(i, row)?;
        }
        Ok(Self { rows, cols, values })
    }

    /// Stores values as given, without any checks. Used to hand arbitrary
    /// matrices to [`validate`].
    pub fn from_rows_unchecked(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        Self {
            rows: n,
            cols,
            values: rows.into_iter().flatten().collect(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Hard prediction Y_{i,M} = argmaxₖ p̂[i][k] (first index on exact ties).
    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    pub fn hard_predictions(&self) -> Vec<usize> {
        (0..self.rows).map(|i| self.argmax(i)).collect()
    }
}

fn normalize_row(index: usize, row: &mut [f64]) -> Result<()> {
    let k = row.len() as f64;
    let mut sum = 0.0;
    for &v in row.iter() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::input(format!(
                "probability row {} contains value {} outside [0, 1]",
                index, v
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::input(format!(
            "probability row {} sums to {}, not 1",
            index, sum
        )));
    }
    if (sum - 1.0).abs() > 1e-12 {
        row.iter_mut().for_each(|v| *v /= sum);
    }
    if row
        .iter()
        .any(|&v| !(PROB_EPSILON..=1.0 - PROB_EPSILON).contains(&v))
    {
        let scale = 1.0 - k * PROB_EPSILON;
        // The final clamp only absorbs rounding in the last bit.
        row.iter_mut()
            .for_each(|v| *v = (scale * *v + PROB_EPSILON).clamp(PROB_EPSILON, 1.0 - PROB_EPSILON));
    }
    Ok(())
}

/// Index of the largest value; first index on exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Dataset-wide class annotation counts, used to break ties between classes:
/// the class annotated more often overall wins, then the lowest index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFrequencies(Vec<usize>);

impl ClassFrequencies {
    pub fn from_table(table: &AnnotationTable) -> Self {
        Self(table.class_counts())
    }

    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    fn count(&self, class: usize) -> usize {
        self.0.get(class).copied().unwrap_or(0)
    }

    /// Picks the preferred class among tied candidates.
    pub fn break_tie(&self, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
        candidates
            .into_iter()
            .min_by_key(|&c| (std::cmp::Reverse(self.count(c)), c))
    }

    /// Most labeled class Y_MLC.
    pub fn most_labeled(&self) -> usize {
        self.break_tie(0..self.0.len()).unwrap_or(0)
    }
}

/// Plurality vote per example with the dataset-frequency tie-break.
pub fn majority_vote(table: &AnnotationTable) -> Vec<usize> {
    let freq = ClassFrequencies::from_table(table);
    let k = table.num_classes();
    let mut votes = vec![0usize; k];
    (0..table.num_examples())
        .map(|i| {
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, label) in table.example_annotations(i) {
                votes[label] += 1;
            }
            let top = votes.iter().copied().max().unwrap_or(0);
            freq.break_tie((0..k).filter(|&c| votes[c] == top))
                .unwrap_or(0)
        })
        .collect()
}

/// Class with the highest posterior probability; exact ties are broken by
/// dataset frequency, then lowest index.
pub fn select_consensus(posterior: &[f64], freq: &ClassFrequencies) -> Result<usize> {
    if let Some(v) = posterior.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite posterior value {}",
            v
        )));
    }
    let top = posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    freq.break_tie((0..posterior.len()).filter(|&k| posterior[k] == top))
        .ok_or_else(|| Error::numerical("empty posterior"))
}

/// Row-wise [`select_consensus`] over a flat n×K matrix.
pub(crate) fn select_consensus_rows(
    values: &[f64],
    num_classes: usize,
    freq: &ClassFrequencies,
) -> Result<Vec<usize>> {
    values
        .chunks(num_classes)
        .map(|row| select_consensus(row, freq))
        .collect()
}

/// Replaces undefined entries by the mean of the defined ones, or by
/// `fallback(j)` when nothing is defined.
pub(crate) fn fill_with_mean(
    values: Vec<Option<f64>>,
    fallback: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (0..values.len()).map(fallback).collect();
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    values.into_iter().map(|v| v.unwrap_or(mean)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateAnnotation {
        example: usize,
        annotator: usize,
    },
    LabelOutOfRange {
        example: usize,
        annotator: usize,
        label: usize,
    },
    UnannotatedExample {
        example: usize,
    },
    SparseAnnotator {
        annotator: usize,
        num_labeled: usize,
    },
    ProbOutOfRange {
        row: usize,
        class: usize,
        value: f64,
    },
    RowSum {
        row: usize,
        sum: f64,
    },
    DimensionMismatch {
        what: String,
        table: usize,
        probs: usize,
    },
}

impl Violation {
    pub fn severity(&self) -> Severity {
        match self {
            Violation::SparseAnnotator { .. } => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateAnnotation { example, annotator } => write!(
                f,
                "duplicate annotation: example {} annotated twice by annotator {}",
                example, annotator
            ),
            Violation::LabelOutOfRange {
                example,
                annotator,
                label,
            } => write!(
                f,
                "label out of range: annotator {} gave label {} to example {}",
                annotator, label, example
            ),
            Violation::UnannotatedExample { example } => {
                write!(
                    f,
                    "unannotated example: example {} has no annotations",
                    example
                )
            }
            Violation::SparseAnnotator {
                annotator,
                num_labeled,
            } => write!(
                f,
                "sparse annotator: annotator {} labeled only {} example(s)",
                annotator, num_labeled
            ),
            Violation::ProbOutOfRange { row, class, value } => write!(
                f,
                "probability out of range: row {} class {} has value {}",
                row, class, value
            ),
            Violation::RowSum { row, sum } => {
                write!(f, "row sum: probability row {} sums to {}", row, sum)
            }
            Violation::DimensionMismatch { what, table, probs } => write!(
                f,
                "dimension mismatch: table has {} {}, probabilities have {}",
                table, what, probs
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub num_examples: usize,
    pub num_annotators: usize,
    pub num_classes: usize,
    pub num_annotations: usize,
    /// |ℐ₊|
    pub num_multi_annotated: usize,
    /// annotation count → number of examples with that many annotations
    pub annotations_per_example: BTreeMap<usize, usize>,
    pub violations: Vec<Violation>,
}

impl ValidationSummary {
    pub fn first_error(&self) -> Option<&Violation> {
        self.violations
            .iter()
            .find(|v| v.severity() == Severity::Error)
    }

    pub fn has_errors(&self) -> bool {
        self.first_error().is_some()
    }
}

/// Reports dataset counts and every invariant violation. Never fails.
pub fn validate(table: &AnnotationTable, probs: Option<&ProbMatrix>) -> ValidationSummary {
    let mut violations = Vec::new();
    let k = table.num_classes();

    for i in 0..table.num_examples() {
        let ann = table.example_annotations(i);
        if ann.is_empty() {
            violations.push(Violation::UnannotatedExample { example: i });
        }
        for w in ann.windows(2) {
            if w[0].0 == w[1].0 {
                violations.push(Violation::DuplicateAnnotation {
                    example: i,
                    annotator: w[0].0,
                });
            }
        }
        for &(annotator, label) in ann {
            if label >= k {
                violations.push(Violation::LabelOutOfRange {
                    example: i,
                    annotator,
                    label,
                });
            }
        }
    }
    for j in 0..table.num_annotators() {
        let count = table.annotator_labels(j).len();
        if count < 2 {
            violations.push(Violation::SparseAnnotator {
                annotator: j,
                num_labeled: count,
            });
        }
    }

    if let Some(probs) = probs {
        if probs.num_rows() != table.num_examples() {
            violations.push(Violation::DimensionMismatch {
                what: "examples".into(),
                table: table.num_examples(),
                probs: probs.num_rows(),
            });
        }
        if probs.num_classes() != k {
            violations.push(Violation::DimensionMismatch {
                what: "classes".into(),
                table: k,
                probs: probs.num_classes(),
            });
        }
        for (row, values) in probs.rows().enumerate() {
            for (class, &value) in values.iter().enumerate() {
                if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                    violations.push(Violation::ProbOutOfRange { row, class, value });
                }
            }
            let sum: f64 = values.iter().sum();
            if sum.is_nan() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                violations.push(Violation::RowSum { row, sum });
            }
        }
    }

    let mut annotations_per_example = BTreeMap::new();
    for i in 0..table.num_examples() {
        *annotations_per_example
            .entry(table.annotation_count(i))
            .or_insert(0) += 1;
    }

    ValidationSummary {
        num_examples: table.num_examples(),
        num_annotators: table.num_annotators(),
        num_classes: k,
        num_annotations: table.num_annotations(),
        num_multi_annotated: table.num_multi_annotated(),
        annotations_per_example,
        violations,
    }
}

/// Per-example consensus output of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub method: String,
    pub rows: Vec<ConsensusRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRow {
    pub consensus_label: usize,
    /// Higher is better. Within `[0, 1]` for every method except
    /// active-label-cleaning, whose score is a negated entropy difference.
    pub quality_score: f64,
    pub num_annotations: usize,
}

impl ConsensusReport {
    pub fn new(
        method: impl Into<String>,
        table: &AnnotationTable,
        labels: &[usize],
        quality: &[f64],
    ) -> Self {
        let rows = labels
            .iter()
            .zip(quality)
            .enumerate()
            .map(|(i, (&consensus_label, &quality_score))| ConsensusRow {
                consensus_label,
                quality_score,
                num_annotations: table.annotation_count(i),
            })
            .collect();
        Self {
            method: method.into(),
            rows,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.consensus_label).collect()
    }

    pub fn quality(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.quality_score).collect()
    }
}

/// Per-annotator output of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorReport {
    pub method: String,
    pub rows: Vec<AnnotatorRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRow {
    pub quality_score: f64,
    pub num_labeled: usize,
    /// Fraction of this annotator's labels equal to the method's consensus.
    pub agreement_with_consensus: f64,
}

impl AnnotatorReport {
    /// Rows for the first `scores.len()` annotators of `table`.
    pub fn new(
        method: impl Into<String>,
        table: &AnnotationTable,
        consensus: &[usize],
        scores: &[f64],
    ) -> Self {
        let rows = scores
            .iter()
            .enumerate()
            .map(|(j, &quality_score)| {
                let labels = table.annotator_labels(j);
                let agree = labels
                    .iter()
                    .filter(|&&(i, label)| consensus[i] == label)
                    .count();
                AnnotatorRow {
                    quality_score,
                    num_labeled: labels.len(),
                    agreement_with_consensus: if labels.is_empty() {
                        0.0
                    } else {
                        agree as f64 / labels.len() as f64
                    },
                }
            })
            .collect();
        Self {
            method: method.into(),
            rows,
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.quality_score).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(k: usize, triples: &[(usize, usize, usize)]) -> AnnotationTable {
        let entries = triples
            .iter()
            .map(|&(i, j, l)| Annotation::new(i, j, l))
            .collect();
        AnnotationTable::from_entries(Some(k), entries).unwrap()
    }

    #[test]
    fn duplicate_annotation_is_reported() {
        let t = table(2, &[(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 0)]);
        let summary = validate(&t, None);
        assert!(summary.violations.iter().any(|v| matches!(
            v,
            Violation::DuplicateAnnotation {
                example: 0,
                annotator: 0
            }
        )));
        assert!(summary
            .first_error()
            .unwrap()
            .to_string()
            .contains("duplicate annotation"));
    }

    #[test]
    fn singly_annotated_dataset_has_no_multi_annotated_examples() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (2, 1, 1), (3, 1, 0)]);
        let summary = validate(&t, None);
        assert_eq!(summary.num_multi_annotated, 0);
        assert_eq!(summary.annotations_per_example.get(&1), Some(&4));
        assert!(!summary.has_errors());
    }

    #[test]
    fn bad_row_sum_is_reported_with_row_index() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (0, 1, 0), (1, 1, 1)]);
        let probs = ProbMatrix::from_rows_unchecked(vec![vec![0.5, 0.5], vec![0.6, 0.3]]);
        let summary = validate(&t, Some(&probs));
        let v = summary
            .violations
            .iter()
            .find(|v| matches!(v, Violation::RowSum { .. }))
            .unwrap();
        assert!(matches!(v, Violation::RowSum { row: 1, .. }));
        assert!(v.to_string().starts_with("row sum"));
    }

    #[test]
    fn sparse_annotator_is_a_warning_and_out_of_range_label_an_error() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (0, 1, 0)]);
        let summary = validate(&t, None);
        assert!(!summary.has_errors());
        assert_eq!(summary.violations.len(), 1);
        assert_eq!(summary.violations[0].severity(), Severity::Warning);

        let t = AnnotationTable::new(1, 2, 1, vec![Annotation::new(0, 0, 5)]).unwrap();
        assert!(t.ensure_valid().is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let t = table(3, &[(0, 0, 0), (1, 0, 2)]);
        let probs = ProbMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let summary = validate(&t, Some(&probs));
        assert!(summary
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DimensionMismatch { .. })));
    }

    #[test]
    fn majority_vote_strict_majority() {
        let t = table(2, &[(0, 0, 0), (0, 1, 0), (0, 2, 1)]);
        assert_eq!(majority_vote(&t), vec![0]);
    }

    #[test]
    fn majority_vote_tie_prefers_more_frequent_class() {
        // Example 0 is a 1-1 tie; the rest of the data has class 1 thirty
        // times and class 0 nine times (plus the tie's own vote).
        let mut triples = vec![(0, 0, 0), (0, 1, 1)];
        for i in 1..=30 {
            triples.push((i, 2, 1));
        }
        for i in 31..=39 {
            triples.push((i, 3, 0));
        }
        let t = table(2, &triples);
        let counts = t.class_counts();
        assert_eq!(counts, vec![10, 31]);
        assert_eq!(majority_vote(&t)[0], 1);
    }

    #[test]
    fn majority_vote_full_tie_prefers_lowest_index() {
        let t = table(2, &[(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0)]);
        assert_eq!(majority_vote(&t), vec![0, 0]);
    }

    #[test]
    fn select_consensus_cases() {
        let balanced = ClassFrequencies::from_counts(vec![5, 5, 5]);
        assert_eq!(select_consensus(&[0.1, 0.7, 0.2], &balanced).unwrap(), 1);
        let skewed = ClassFrequencies::from_counts(vec![3, 8]);
        assert_eq!(select_consensus(&[0.5, 0.5], &skewed).unwrap(), 1);
        let third = 1.0 / 3.0;
        assert_eq!(
            select_consensus(&[third, third, third], &balanced).unwrap(),
            0
        );
        assert!(select_consensus(&[f64::NAN, 0.5], &balanced).is_err());
    }

    #[test]
    fn prob_rows_are_renormalized_and_clamped() {
        let p = ProbMatrix::from_rows(vec![vec![0.3, 0.7000003], vec![1.0, 0.0]]).unwrap();
        let s: f64 = p.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(p.row(1)[0], 1.0 - PROB_EPSILON);
        assert_eq!(p.row(1)[1], PROB_EPSILON);
        assert!(ProbMatrix::from_rows(vec![vec![0.5, 0.3]]).is_err());
        assert!(ProbMatrix::from_rows(vec![vec![1.2, -0.2]]).is_err());
    }

    #[test]
    fn in_range_rows_are_stored_exactly() {
        let row = vec![0.1, 0.2, 0.7];
        let p = ProbMatrix::from_rows(vec![row.clone()]).unwrap();
        assert_eq!(p.row(0), row.as_slice());
    }

    #[test]
    fn extra_annotator_labels_every_example() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (1, 1, 1)]);
        let aug = t.with_extra_annotator(&[1, 0]).unwrap();
        assert_eq!(aug.num_annotators(), 3);
        assert_eq!(aug.num_annotations(), t.num_annotations() + 2);
        assert_eq!(aug.annotator_labels(2), &[(0, 1), (1, 0)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_table() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
            (2usize..5, 1usize..8, 1usize..6).prop_flat_map(|(k, n, m)| {
                let cell = (0..k, any::<bool>());
                (
                    Just(k),
                    Just(n),
                    Just(m),
                    prop::collection::vec(cell, n * m),
                )
                    .prop_map(|(k, n, m, cells)| {
                        let mut triples = Vec::new();
                        for i in 0..n {
                            for j in 0..m {
                                let (label, present) = cells[i * m + j];
                                if present || j == i % m {
                                    triples.push((i, j, label));
                                }
                            }
                        }
                        (k, triples)
                    })
            })
        }

        proptest! {
            #[test]
            fn majority_vote_ignores_annotator_relabeling((k, triples) in arb_table(), shift in 0usize..6) {
                let m = triples.iter().map(|t| t.1 + 1).max().unwrap();
                let base = table(k, &triples);
                let permuted: Vec<_> = triples
                    .iter()
                    .map(|&(i, j, l)| (i, (j + shift) % m, l))
                    .collect();
                let other = table(k, &permuted);
                prop_assert_eq!(majority_vote(&base), majority_vote(&other));
            }

            #[test]
            fn unanimous_examples_vote_their_label((k, triples) in arb_table()) {
                let t = table(k, &triples);
                let mv = majority_vote(&t);
                for i in 0..t.num_examples() {
                    let ann = t.example_annotations(i);
                    if ann.iter().all(|a| a.1 == ann[0].1) {
                        prop_assert_eq!(mv[i], ann[0].1);
                    }
                }
            }

            #[test]
            fn unique_argmax_is_selected(values in prop::collection::vec(0.0f64..1.0, 2..6)) {
                let freq = ClassFrequencies::from_counts(vec![1; values.len()]);
                let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let winners: Vec<_> = (0..values.len()).filter(|&k| values[k] == top).collect();
                prop_assume!(winners.len() == 1);
                prop_assert_eq!(select_consensus(&values, &freq).unwrap(), winners[0]);
            }
        }
    }
}
