//! Weighted-ensemble aggregation of classifier probabilities and individual
//! annotations.
//!
//! Every annotator is turned into a probabilistic predictor through a single
//! shared accuracy parameter `P`, and each predictor (the classifier and every
//! annotator) gets a trust weight of one minus its error relative to the
//! always-predict-the-most-labeled-class baseline. The weighted average of the
//! predictors is the posterior from which consensus labels, consensus quality
//! and annotator quality are read. Nothing here is iterative.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{
    fill_with_mean, majority_vote, AnnotationTable, AnnotatorReport, ClassFrequencies,
    ConsensusReport, ProbMatrix, PROB_EPSILON,
};
use crate::error::{Error, Result};
use crate::label_quality::{agreement_on_all, agreement_on_multi_annotated, mean_label_quality};
use crate::posterior::ClassPosterior;

pub type CrowdlabPosterior = ClassPosterior;

/// Trust weights of the ensemble and the statistics they derive from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrustWeights {
    /// Shared annotator accuracy used in every annotator likelihood vector.
    pub likelihood_param: f64,
    /// sⱼ: agreement of each annotator with co-annotators.
    pub annotator_agreement: Vec<f64>,
    /// wⱼ
    pub annotator: Vec<f64>,
    /// w_M
    pub model: f64,
    /// A_M: classifier accuracy against majority vote on ℐ₊.
    pub model_accuracy: f64,
    /// A_MLC: accuracy of always predicting the most labeled class.
    pub mlc_accuracy: f64,
}

/// Intermediate pieces of the annotator score aⱼ = w̄·Qⱼ + (1 − w̄)·Aⱼ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotatorScoreParts {
    /// Qⱼ: mean posterior probability of annotator j's labels.
    pub label_quality: Vec<f64>,
    /// Aⱼ: agreement with consensus on multiply-annotated examples.
    pub agreement: Vec<f64>,
    /// w̄: trust in the classifier relative to the average annotator.
    pub model_share: f64,
    /// w₀
    pub mean_annotator_weight: f64,
    /// aⱼ
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrowdlabOutput {
    pub consensus: ConsensusReport,
    pub posterior: CrowdlabPosterior,
    pub weights: TrustWeights,
    pub annotator_parts: AnnotatorScoreParts,
    pub annotators: AnnotatorReport,
}

fn clamp_likelihood_param(p: f64, k: usize) -> f64 {
    p.clamp(1.0 / k as f64 + PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// P: mean per-example agreement with majority vote over ℐ₊, clamped to
/// `[1/K + ε, 1 − ε]`.
///
/// With no multiply-annotated example, P is the fraction of annotations that
/// match the classifier's hard prediction.
pub fn estimate_likelihood_param(
    table: &AnnotationTable,
    mv_labels: &[usize],
    model_predictions: &[usize],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..table.num_examples()).filter(|&i| table.is_multi_annotated(i)) {
        let ann = table.example_annotations(i);
        let agree = ann.iter().filter(|&&(_, l)| l == mv_labels[i]).count();
        total += agree as f64 / ann.len() as f64;
        count += 1;
    }
    let raw = if count > 0 {
        total / count as f64
    } else {
        let matches = table
            .entries()
            .iter()
            .filter(|a| a.label == model_predictions[a.example])
            .count();
        matches as f64 / table.num_annotations().max(1) as f64
    };
    clamp_likelihood_param(raw, table.num_classes())
}

/// Likelihood vector of one annotation: `P` on the given label and
/// `(1 − P)/(K − 1)` elsewhere.
pub fn annotator_likelihood(label: usize, p: f64, num_classes: usize) -> Result<Vec<f64>> {
    if num_classes < 2 {
        return Err(Error::input(
            "annotator likelihood needs at least two classes",
        ));
    }
    if label >= num_classes {
        return Err(Error::input(format!(
            "label {} out of range for {} classes",
            label, num_classes
        )));
    }
    let mut v = vec![(1.0 - p) / (num_classes - 1) as f64; num_classes];
    v[label] = p;
    Ok(v)
}

/// sⱼ: fraction of pairwise agreements between annotator j and the other
/// annotators of the examples j labeled.
///
/// Annotators who share no example get the mean of the defined values. When
/// no annotator shares any example, sⱼ is annotator j's agreement with the
/// classifier's hard predictions.
pub fn annotator_agreement(table: &AnnotationTable, model_predictions: &[usize]) -> Vec<f64> {
    let raw = (0..table.num_annotators())
        .map(|j| {
            let (mut matches, mut pairs) = (0usize, 0usize);
            for &(i, label) in table.annotator_labels(j) {
                let ann = table.example_annotations(i);
                pairs += ann.len() - 1;
                matches += ann
                    .iter()
                    .filter(|&&(other, l)| other != j && l == label)
                    .count();
            }
            (pairs > 0).then(|| matches as f64 / pairs as f64)
        })
        .collect();
    fill_with_mean(raw, |j| agreement_on_all(table, model_predictions, j))
}

/// Indices used as the reference set for A_M and A_MLC: ℐ₊, or every
/// example when ℐ₊ is empty.
fn reference_examples(table: &AnnotationTable) -> Vec<usize> {
    let multi: Vec<usize> = (0..table.num_examples())
        .filter(|&i| table.is_multi_annotated(i))
        .collect();
    if multi.is_empty() {
        (0..table.num_examples()).collect()
    } else {
        multi
    }
}

/// A_M: accuracy of the classifier's hard predictions against majority vote.
pub fn model_accuracy(table: &AnnotationTable, probs: &ProbMatrix, mv_labels: &[usize]) -> f64 {
    let reference = reference_examples(table);
    let hits = reference
        .iter()
        .filter(|&&i| probs.argmax(i) == mv_labels[i])
        .count();
    hits as f64 / reference.len().max(1) as f64
}

/// A_MLC, clamped to at most 1 − ε.
pub fn mlc_accuracy(table: &AnnotationTable, mv_labels: &[usize]) -> f64 {
    let mlc = ClassFrequencies::from_table(table).most_labeled();
    let reference = reference_examples(table);
    let hits = reference.iter().filter(|&&i| mv_labels[i] == mlc).count();
    (hits as f64 / reference.len().max(1) as f64).min(1.0 - PROB_EPSILON)
}

/// wⱼ = 1 − (1 − sⱼ)/(1 − A_MLC) and
/// w_M = (1 − (1 − A_M)/(1 − A_MLC)) · sqrt(mean |𝒥ᵢ|), both floored at 0.
pub fn compute_weights(
    likelihood_param: f64,
    annotator_agreement: Vec<f64>,
    model_accuracy: f64,
    mlc_accuracy: f64,
    table: &AnnotationTable,
) -> TrustWeights {
    let baseline_error = 1.0 - mlc_accuracy;
    let annotator = annotator_agreement
        .iter()
        .map(|s| (1.0 - (1.0 - s) / baseline_error).max(0.0))
        .collect();
    let model = ((1.0 - (1.0 - model_accuracy) / baseline_error)
        * table.mean_annotations_per_example().sqrt())
    .max(0.0);
    TrustWeights {
        likelihood_param,
        annotator_agreement,
        annotator,
        model,
        model_accuracy,
        mlc_accuracy,
    }
}

/// Weighted average of the classifier row and the annotator likelihood
/// vectors of each example.
///
/// If every weight entering an example is zero, the unweighted mean of the
/// same vectors is used instead.
pub fn crowdlab_posterior(
    table: &AnnotationTable,
    probs: &ProbMatrix,
    weights: &TrustWeights,
) -> CrowdlabPosterior {
    let k = table.num_classes();
    let p = weights.likelihood_param;
    let off = (1.0 - p) / (k - 1) as f64;
    let mut values = vec![0.0; table.num_examples() * k];
    values.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let ann = table.example_annotations(i);
        let model_row = probs.row(i);
        let mut by_class = vec![0.0; k];
        let mut annotator_total = 0.0;
        for &(j, label) in ann {
            let w = weights.annotator[j];
            by_class[label] += w;
            annotator_total += w;
        }
        let mut model_weight = weights.model;
        let mut denom = model_weight + annotator_total;
        if denom <= 0.0 {
            by_class.iter_mut().for_each(|b| *b = 0.0);
            for &(_, label) in ann {
                by_class[label] += 1.0;
            }
            annotator_total = ann.len() as f64;
            model_weight = 1.0;
            denom = 1.0 + annotator_total;
        }
        for c in 0..k {
            row[c] =
                (model_weight * model_row[c] + off * annotator_total + (p - off) * by_class[c])
                    / denom;
        }
    });
    ClassPosterior::from_flat(k, values)
}

/// Estimates P, sⱼ, A_M and A_MLC from majority vote and turns them into
/// trust weights.
pub fn estimate_weights(table: &AnnotationTable, probs: &ProbMatrix) -> TrustWeights {
    let mv = majority_vote(table);
    let predictions = probs.hard_predictions();
    let p = estimate_likelihood_param(table, &mv, &predictions);
    let s = annotator_agreement(table, &predictions);
    let a_m = model_accuracy(table, probs, &mv);
    let a_mlc = mlc_accuracy(table, &mv);
    compute_weights(p, s, a_m, a_mlc, table)
}

fn check_inputs(table: &AnnotationTable, probs: &ProbMatrix) -> Result<()> {
    table.ensure_valid()?;
    if probs.num_rows() != table.num_examples() || probs.num_classes() != table.num_classes() {
        return Err(Error::input(format!(
            "probabilities are {}x{} but the table has {} examples and {} classes",
            probs.num_rows(),
            probs.num_classes(),
            table.num_examples(),
            table.num_classes()
        )));
    }
    if table.num_classes() < 2 {
        return Err(Error::input("at least two classes are required"));
    }
    Ok(())
}

/// Full pipeline: weights, posterior, consensus labels with their quality,
/// and annotator quality.
pub fn crowdlab_score(table: &AnnotationTable, probs: &ProbMatrix) -> Result<CrowdlabOutput> {
    check_inputs(table, probs)?;
    let weights = estimate_weights(table, probs);
    let posterior = crowdlab_posterior(table, probs, &weights);
    let freq = ClassFrequencies::from_table(table);
    let labels = posterior.consensus(&freq)?;
    let quality = posterior.quality_for(&labels);
    let parts = crowdlab_annotator_quality(table, &posterior, &weights, &labels);
    let annotators = AnnotatorReport::new("crowdlab", table, &labels, &parts.scores);
    Ok(CrowdlabOutput {
        consensus: ConsensusReport::new("crowdlab", table, &labels, &quality),
        posterior,
        weights,
        annotator_parts: parts,
        annotators,
    })
}

/// Annotator scores from the ensemble posterior and the ensemble's consensus.
pub fn crowdlab_annotator_quality(
    table: &AnnotationTable,
    posterior: &CrowdlabPosterior,
    weights: &TrustWeights,
    consensus: &[usize],
) -> AnnotatorScoreParts {
    let m = table.num_annotators();
    let label_quality = mean_label_quality(table, m, |i| posterior.row(i));
    let agreement = fill_with_mean(agreement_on_multi_annotated(table, consensus), |j| {
        agreement_on_all(table, consensus, j)
    });
    let weight_sum: f64 = weights.annotator.iter().sum();
    let mean_annotator_weight = if m == 0 {
        0.0
    } else {
        weight_sum / m as f64 * table.mean_annotations_per_example()
    };
    let model_share = model_share(weights.model, mean_annotator_weight);
    let scores = label_quality
        .iter()
        .zip(&agreement)
        .map(|(q, a)| model_share * q + (1.0 - model_share) * a)
        .collect();
    AnnotatorScoreParts {
        label_quality,
        agreement,
        model_share,
        mean_annotator_weight,
        scores,
    }
}

/// w̄ = w_M / (w_M + w₀), taken as 0 whenever w_M is 0.
pub fn model_share(model_weight: f64, mean_annotator_weight: f64) -> f64 {
    if model_weight <= 0.0 {
        0.0
    } else {
        model_weight / (model_weight + mean_annotator_weight)
    }
}

/// Variant where all annotators are pooled into a single average annotator
/// with one shared weight against the classifier.
#[derive(Debug, Clone)]
pub struct NpwOutput {
    pub consensus: ConsensusReport,
    pub annotators: AnnotatorReport,
    pub posterior: ClassPosterior,
    /// w = A_M / (A_M + Ā)
    pub model_share: f64,
    /// Ā: label-count-weighted mean annotator accuracy against majority vote.
    pub mean_annotator_accuracy: f64,
    pub model_accuracy: f64,
    /// w_M = w · (1/n) Σᵢ sqrt|𝒥ᵢ|
    pub model_weight: f64,
}

/// Pooled-annotator posterior: the annotator term of example i is the mean of
/// sⱼ-shaped likelihood vectors over 𝒥ᵢ, weighted by (1 − w)·sqrt|𝒥ᵢ|.
pub fn npw_posterior(
    table: &AnnotationTable,
    probs: &ProbMatrix,
    annotator_agreement: &[f64],
    model_share: f64,
) -> ClassPosterior {
    let k = table.num_classes();
    let n = table.num_examples();
    let sqrt_mean = (0..n)
        .map(|i| (table.annotation_count(i) as f64).sqrt())
        .sum::<f64>()
        / n.max(1) as f64;
    let model_weight = model_share * sqrt_mean;
    let mut values = vec![0.0; n * k];
    values.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let ann = table.example_annotations(i);
        let count = ann.len() as f64;
        let mut pooled = vec![0.0; k];
        for &(j, label) in ann {
            let s = annotator_agreement[j];
            let off = (1.0 - s) / (k - 1) as f64;
            for (c, v) in pooled.iter_mut().enumerate() {
                *v += if c == label { s } else { off };
            }
        }
        pooled.iter_mut().for_each(|v| *v /= count);
        let annotator_weight = (1.0 - model_share) * count.sqrt();
        let denom = model_weight + annotator_weight;
        let model_row = probs.row(i);
        for c in 0..k {
            row[c] = (model_weight * model_row[c] + annotator_weight * pooled[c]) / denom;
        }
    });
    ClassPosterior::from_flat(k, values)
}

pub fn npw_score(table: &AnnotationTable, probs: &ProbMatrix) -> Result<NpwOutput> {
    check_inputs(table, probs)?;
    let mv = majority_vote(table);
    let predictions = probs.hard_predictions();
    let s = annotator_agreement(table, &predictions);
    let agreement = fill_with_mean(agreement_on_multi_annotated(table, &mv), |j| {
        agreement_on_all(table, &mv, j)
    });
    let (weighted, total) = (0..table.num_annotators()).fold((0.0, 0usize), |(acc, n), j| {
        let count = table.annotator_labels(j).len();
        (acc + agreement[j] * count as f64, n + count)
    });
    let mean_annotator_accuracy = weighted / total.max(1) as f64;
    let a_m = model_accuracy(table, probs, &mv);
    let model_share = if a_m + mean_annotator_accuracy > 0.0 {
        a_m / (a_m + mean_annotator_accuracy)
    } else {
        0.5
    };

    let posterior = npw_posterior(table, probs, &s, model_share);
    let freq = ClassFrequencies::from_table(table);
    let labels = posterior.consensus(&freq)?;
    let quality = posterior.quality_for(&labels);
    let label_quality = mean_label_quality(table, table.num_annotators(), |i| posterior.row(i));
    let scores: Vec<f64> = label_quality
        .iter()
        .zip(&agreement)
        .map(|(q, a)| model_share * q + (1.0 - model_share) * a)
        .collect();
    let n = table.num_examples();
    let sqrt_mean = (0..n)
        .map(|i| (table.annotation_count(i) as f64).sqrt())
        .sum::<f64>()
        / n.max(1) as f64;
    Ok(NpwOutput {
        consensus: ConsensusReport::new("crowdlab-npw", table, &labels, &quality),
        annotators: AnnotatorReport::new("crowdlab-npw", table, &labels, &scores),
        posterior,
        model_share,
        mean_annotator_accuracy,
        model_accuracy: a_m,
        model_weight: model_share * sqrt_mean,
    })
}
