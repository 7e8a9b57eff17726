use serde::Serialize;

use crate::dataset::{select_consensus_rows, ClassFrequencies};
use crate::error::Result;

/// n×K matrix of per-example class probabilities produced by an aggregation
/// method (ensemble, Dawid-Skene, GLAD, empirical Bayes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPosterior {
    num_classes: usize,
    values: Vec<f64>,
}

impl ClassPosterior {
    pub fn from_flat(num_classes: usize, values: Vec<f64>) -> Self {
        debug_assert!(num_classes > 0 && values.len().is_multiple_of(num_classes));
        Self {
            num_classes,
            values,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.num_classes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Self-confidence of the given labels: `posterior[i][labels[i]]`.
    pub fn quality_for(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.row(i)[l])
            .collect()
    }

    /// Highest-probability class per row, ties broken by `freq`.
    pub fn consensus(&self, freq: &ClassFrequencies) -> Result<Vec<usize>> {
        select_consensus_rows(&self.values, self.num_classes, freq)
    }
}
