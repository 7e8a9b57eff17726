//! Baseline consensus and annotator scores built from annotator agreement or
//! from classifier self-confidence, plus the active-label-cleaning score.

use crate::dataset::{fill_with_mean, AnnotationTable, ProbMatrix};
use crate::error::{Error, Result};

/// Label quality rule L(Y, p). Self-confidence is the only rule provided.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LabelQualityScorer {
    #[default]
    SelfConfidence,
}

impl LabelQualityScorer {
    pub fn score(self, label: usize, probs: &[f64]) -> Result<f64> {
        match self {
            LabelQualityScorer::SelfConfidence => self_confidence(label, probs),
        }
    }
}

/// L(Y, p) = p[Y].
pub fn self_confidence(label: usize, probs: &[f64]) -> Result<f64> {
    probs.get(label).copied().ok_or_else(|| {
        Error::input(format!(
            "label {} out of range for {} classes",
            label,
            probs.len()
        ))
    })
}

/// Fraction of an example's annotators that agree with its consensus label.
pub fn agreement_consensus_quality(table: &AnnotationTable, consensus: &[usize]) -> Vec<f64> {
    (0..table.num_examples())
        .map(|i| {
            let ann = table.example_annotations(i);
            let agree = ann.iter().filter(|&&(_, l)| l == consensus[i]).count();
            agree as f64 / ann.len() as f64
        })
        .collect()
}

/// qᵢ = p̂_M[i][Ŷᵢ].
pub fn lqs_consensus_quality(consensus: &[usize], probs: &ProbMatrix) -> Vec<f64> {
    consensus
        .iter()
        .enumerate()
        .map(|(i, &label)| probs.row(i)[label])
        .collect()
}

/// Per-annotator agreement with `consensus` over ℐ_{j,+}; `None` where that
/// set is empty.
pub(crate) fn agreement_on_multi_annotated(
    table: &AnnotationTable,
    consensus: &[usize],
) -> Vec<Option<f64>> {
    (0..table.num_annotators())
        .map(|j| {
            let (mut hits, mut total) = (0usize, 0usize);
            for &(i, label) in table.annotator_labels(j) {
                if table.is_multi_annotated(i) {
                    total += 1;
                    hits += usize::from(label == consensus[i]);
                }
            }
            (total > 0).then(|| hits as f64 / total as f64)
        })
        .collect()
}

/// Agreement of annotator `j` with `consensus` over all of ℐⱼ.
pub(crate) fn agreement_on_all(table: &AnnotationTable, consensus: &[usize], j: usize) -> f64 {
    let labels = table.annotator_labels(j);
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().filter(|&&(i, l)| consensus[i] == l).count();
    hits as f64 / labels.len() as f64
}

/// Agreement with consensus restricted to multiply-annotated examples.
///
/// Annotators who only labeled singly-annotated examples get the mean of the
/// defined scores. If no annotator has a defined score (no example has more
/// than one annotation), each annotator falls back to their agreement over
/// all of their labels.
pub fn agreement_annotator_quality(table: &AnnotationTable, consensus: &[usize]) -> Vec<f64> {
    fill_with_mean(agreement_on_multi_annotated(table, consensus), |j| {
        agreement_on_all(table, consensus, j)
    })
}

/// aⱼ = mean self-confidence of annotator j's labels under `probs`.
pub fn lqs_annotator_quality(table: &AnnotationTable, probs: &ProbMatrix) -> Vec<f64> {
    mean_label_quality(table, table.num_annotators(), |i| probs.row(i))
}

/// Mean of p[i][Yᵢⱼ] over ℐⱼ for the first `num_annotators` annotators.
pub(crate) fn mean_label_quality<'a>(
    table: &AnnotationTable,
    num_annotators: usize,
    row: impl Fn(usize) -> &'a [f64],
) -> Vec<f64> {
    (0..num_annotators)
        .map(|j| {
            let labels = table.annotator_labels(j);
            if labels.is_empty() {
                return 0.0;
            }
            let total: f64 = labels.iter().map(|&(i, l)| row(i)[l]).sum();
            total / labels.len() as f64
        })
        .collect()
}

/// Active-label-cleaning score, negated so that higher means better.
///
/// The raw score is CE(p̂_emp, p̂_M) − H(p̂_M), where p̂_emp is the histogram of
/// the example's annotations. Natural logarithms throughout.
pub fn alc_consensus_quality(table: &AnnotationTable, probs: &ProbMatrix) -> Vec<f64> {
    let k = table.num_classes();
    let mut hist = vec![0.0; k];
    (0..table.num_examples())
        .map(|i| {
            hist.iter_mut().for_each(|h| *h = 0.0);
            let ann = table.example_annotations(i);
            for &(_, label) in ann {
                hist[label] += 1.0;
            }
            let total = ann.len() as f64;
            -alc_raw_score(
                &hist.iter().map(|h| h / total).collect::<Vec<_>>(),
                probs.row(i),
            )
        })
        .collect()
}

/// CE(empirical, model) − H(model).
pub fn alc_raw_score(empirical: &[f64], model: &[f64]) -> f64 {
    let cross_entropy: f64 = empirical
        .iter()
        .zip(model)
        .filter(|(e, _)| **e > 0.0)
        .map(|(e, p)| -e * p.ln())
        .sum();
    let entropy: f64 = model
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    cross_entropy - entropy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, PROB_EPSILON};
    use approx::assert_abs_diff_eq;

    fn table(k: usize, triples: &[(usize, usize, usize)]) -> AnnotationTable {
        let entries = triples
            .iter()
            .map(|&(i, j, l)| Annotation::new(i, j, l))
            .collect();
        AnnotationTable::from_entries(Some(k), entries).unwrap()
    }

    #[test]
    fn self_confidence_reads_the_label_column() {
        assert_eq!(self_confidence(1, &[0.2, 0.8]).unwrap(), 0.8);
        assert_eq!(self_confidence(2, &[0.5, 0.3, 0.2]).unwrap(), 0.2);
        let p = ProbMatrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(self_confidence(0, p.row(0)).unwrap(), 1.0 - PROB_EPSILON);
        assert!(self_confidence(3, &[0.5, 0.5]).is_err());
        assert_eq!(
            LabelQualityScorer::default()
                .score(0, &[0.25, 0.75])
                .unwrap(),
            0.25
        );
    }

    #[test]
    fn agreement_consensus_examples() {
        let t = table(
            4,
            &[
                (0, 0, 0),
                (0, 1, 0),
                (0, 2, 1),
                (1, 0, 2),
                (2, 0, 0),
                (2, 1, 1),
                (2, 2, 2),
                (2, 3, 3),
            ],
        );
        let q = agreement_consensus_quality(&t, &[0, 2, 0]);
        assert_abs_diff_eq!(q[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(q[1], 1.0);
        assert_eq!(q[2], 0.25);
    }

    #[test]
    fn lqs_consensus_examples() {
        let p = ProbMatrix::from_rows(vec![vec![0.3, 0.7]]).unwrap();
        assert_eq!(lqs_consensus_quality(&[1], &p), vec![0.7]);
        let p = ProbMatrix::from_rows(vec![vec![0.25; 4]]).unwrap();
        assert_eq!(lqs_consensus_quality(&[0], &p), vec![0.25]);
        let p = ProbMatrix::from_rows(vec![vec![0.05, 0.05, 0.9]]).unwrap();
        assert_eq!(lqs_consensus_quality(&[2], &p), vec![0.9]);
    }

    #[test]
    fn agreement_annotator_counts_multi_annotated_only() {
        // Annotator 0 labels 4 doubly-annotated examples, matching 3, plus a
        // singly-annotated one that must be ignored.
        let t = table(
            2,
            &[
                (0, 0, 0),
                (0, 1, 0),
                (1, 0, 1),
                (1, 1, 1),
                (2, 0, 0),
                (2, 1, 0),
                (3, 0, 1),
                (3, 1, 0),
                (4, 0, 1),
                (5, 2, 0),
                (6, 2, 1),
            ],
        );
        let consensus = vec![0, 1, 0, 0, 0, 0, 1];
        let a = agreement_annotator_quality(&t, &consensus);
        assert_eq!(a[0], 0.75);
        assert_eq!(a[1], 1.0);
        // Annotator 2 never shares an example: mean of the defined scores.
        assert_abs_diff_eq!(a[2], (0.75 + 1.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn agreement_annotator_all_singly_annotated_falls_back_to_raw_agreement() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (2, 1, 1), (3, 1, 1)]);
        let a = agreement_annotator_quality(&t, &[0, 0, 1, 1]);
        assert_eq!(a, vec![0.5, 1.0]);
    }

    #[test]
    fn lqs_annotator_examples() {
        let t = table(2, &[(0, 0, 1), (1, 0, 0), (0, 1, 0), (1, 1, 1), (2, 1, 1)]);
        let p =
            ProbMatrix::from_rows(vec![vec![0.1, 0.9], vec![0.5, 0.5], vec![0.7, 0.3]]).unwrap();
        let a = lqs_annotator_quality(&t, &p);
        assert_abs_diff_eq!(a[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], (0.1 + 0.5 + 0.3) / 3.0, epsilon = 1e-15);

        let t = table(3, &[(0, 0, 0), (1, 0, 1), (2, 0, 2)]);
        let p = ProbMatrix::from_rows(vec![
            vec![0.1, 0.45, 0.45],
            vec![0.4, 0.2, 0.4],
            vec![0.35, 0.35, 0.3],
        ])
        .unwrap();
        assert_abs_diff_eq!(lqs_annotator_quality(&t, &p)[0], 0.2, epsilon = 1e-15);

        let onehot = ProbMatrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_abs_diff_eq!(lqs_annotator_quality(&t, &onehot)[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn alc_examples() {
        // Model confident on the annotated class.
        let t = table(2, &[(0, 0, 0), (0, 1, 0)]);
        let p = ProbMatrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(alc_consensus_quality(&t, &p)[0], 0.0, epsilon = 1e-4);

        // Uniform model: CE = H = ln 2.
        let p = ProbMatrix::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(alc_consensus_quality(&t, &p)[0], 0.0, epsilon = 1e-15);

        // Model (0.9, 0.1), annotations all class 1.
        let t = table(2, &[(0, 0, 1)]);
        let p = ProbMatrix::from_rows(vec![vec![0.9, 0.1]]).unwrap();
        assert_abs_diff_eq!(alc_consensus_quality(&t, &p)[0], -1.977502, epsilon = 1e-6);
    }

    #[test]
    fn alc_maximizer_agrees_with_the_mode_without_exceeding_it() {
        // Empirical distribution (0.75, 0.25); scan the model's p[0] on a grid.
        // The score is (0.75 − p)·ln(p/(1−p)), so its peak lies in (0.5, 0.75).
        let emp = [0.75, 0.25];
        let best = (1..1000)
            .map(|s| s as f64 / 1000.0)
            .max_by(|a, b| {
                let qa = -alc_raw_score(&emp, &[*a, 1.0 - a]);
                let qb = -alc_raw_score(&emp, &[*b, 1.0 - b]);
                qa.partial_cmp(&qb).unwrap()
            })
            .unwrap();
        assert!(best > 0.5 && best < 0.75, "{}", best);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn agreement_lies_on_the_rational_grid(labels in prop::collection::vec(0usize..3, 1..9), consensus in 0usize..3) {
                let triples: Vec<_> = labels.iter().enumerate().map(|(j, &l)| (0, j, l)).collect();
                let t = table(3, &triples);
                let q = agreement_consensus_quality(&t, &[consensus])[0];
                let scaled = q * labels.len() as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&q));
            }

            #[test]
            fn alc_ignores_annotator_identity(labels in prop::collection::vec(0usize..3, 1..7), rotate in 0usize..7) {
                let n = labels.len();
                let a: Vec<_> = labels.iter().enumerate().map(|(j, &l)| (0, j, l)).collect();
                let b: Vec<_> = labels.iter().enumerate().map(|(j, &l)| (0, (j + rotate) % n, l)).collect();
                let p = ProbMatrix::from_rows(vec![vec![0.2, 0.5, 0.3]]).unwrap();
                prop_assert_eq!(
                    alc_consensus_quality(&table(3, &a), &p),
                    alc_consensus_quality(&table(3, &b), &p)
                );
            }

            #[test]
            fn self_confidence_depends_only_on_its_column(p0 in 0.0f64..1.0, split in 0.0f64..1.0) {
                let rest = 1.0 - p0;
                let a = [p0, rest * split, rest * (1.0 - split)];
                let b = [p0, rest * (1.0 - split), rest * split];
                prop_assert_eq!(self_confidence(0, &a).unwrap(), self_confidence(0, &b).unwrap());
            }
        }
    }
}
