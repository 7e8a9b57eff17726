//! Dawid-Skene confusion-matrix model fitted by expectation-maximization.
//!
//! Each annotator j has a K×K matrix π⁽ʲ⁾ with π⁽ʲ⁾[k][ℓ] = P(annotator says ℓ |
//! true class k). The class prior is held at the empirical marginal of all
//! given labels. The M-step adds a Laplace pseudocount to every confusion
//! cell, so EM climbs the penalized log-likelihood
//! `log p(labels | π) + smoothing · Σ log π`, which is what
//! [`DsFit::objective`] records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{majority_vote, AnnotationTable, ProbMatrix};
use crate::error::{Error, Result};
use crate::posterior::ClassPosterior;

pub type DsPosterior = ClassPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsConfig {
    pub max_iter: usize,
    /// Stop once the largest absolute change of any posterior entry drops below this.
    pub tol: f64,
    /// Pseudocount added to every confusion-matrix cell in the M-step.
    pub smoothing: f64,
}

impl Default for DsConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-5,
            smoothing: 1.0,
        }
    }
}

/// Per-annotator confusion matrices and the class prior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionModel {
    num_classes: usize,
    /// m blocks of K×K, row-major, rows indexed by the true class.
    confusion: Vec<f64>,
    prior: Vec<f64>,
}

impl ConfusionModel {
    pub fn new(num_classes: usize, matrices: Vec<Vec<Vec<f64>>>, prior: Vec<f64>) -> Result<Self> {
        let k = num_classes;
        if prior.len() != k {
            return Err(Error::input("prior length does not match class count"));
        }
        let mut confusion = Vec::with_capacity(matrices.len() * k * k);
        for m in &matrices {
            if m.len() != k || m.iter().any(|row| row.len() != k) {
                return Err(Error::input("confusion matrix is not KxK"));
            }
            m.iter().for_each(|row| confusion.extend_from_slice(row));
        }
        Ok(Self {
            num_classes,
            confusion,
            prior,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_annotators(&self) -> usize {
        self.confusion.len() / (self.num_classes * self.num_classes)
    }

    /// Row-major K×K confusion matrix of annotator `j`.
    pub fn matrix(&self, j: usize) -> &[f64] {
        let kk = self.num_classes * self.num_classes;
        &self.confusion[j * kk..(j + 1) * kk]
    }

    /// π⁽ʲ⁾[true_class][label]
    pub fn entry(&self, j: usize, true_class: usize, label: usize) -> f64 {
        self.matrix(j)[true_class * self.num_classes + label]
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Drops every annotator from index `m` on (used to hide the synthetic
    /// model annotator).
    pub fn truncated(&self, m: usize) -> Self {
        let kk = self.num_classes * self.num_classes;
        Self {
            num_classes: self.num_classes,
            confusion: self.confusion[..m * kk].to_vec(),
            prior: self.prior.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DsFit {
    pub model: ConfusionModel,
    pub posterior: DsPosterior,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    /// Penalized log-likelihood (the quantity EM is guaranteed not to decrease).
    pub objective: Vec<f64>,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-scores in place into probabilities; returns the log normalizer.
pub(crate) fn normalize_log_row(row: &mut [f64]) -> f64 {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    lse
}

enum Prior<'a> {
    Shared(&'a [f64]),
    PerExample(&'a ProbMatrix),
}

/// Posterior ∝ prior[k] · Π_{j∈𝒥ᵢ} π⁽ʲ⁾[k][Yᵢⱼ], computed in log space.
/// Returns the posterior and the observed-data log-likelihood.
fn e_step(table: &AnnotationTable, model: &ConfusionModel, prior: Prior<'_>) -> (DsPosterior, f64) {
    let k = table.num_classes();
    let log_conf: Vec<f64> = model.confusion.iter().map(|p| p.ln()).collect();
    let shared_log_prior: Vec<f64> = match prior {
        Prior::Shared(p) => p.iter().map(|v| v.ln()).collect(),
        Prior::PerExample(_) => Vec::new(),
    };
    let mut values = vec![0.0; table.num_examples() * k];
    let normalizers: Vec<f64> = values
        .par_chunks_mut(k)
        .enumerate()
        .map(|(i, row)| {
            match prior {
                Prior::Shared(_) => row.copy_from_slice(&shared_log_prior),
                Prior::PerExample(probs) => row
                    .iter_mut()
                    .zip(probs.row(i))
                    .for_each(|(r, p)| *r = p.ln()),
            }
            for &(j, label) in table.example_annotations(i) {
                let block = &log_conf[j * k * k..(j + 1) * k * k];
                for (c, r) in row.iter_mut().enumerate() {
                    *r += block[c * k + label];
                }
            }
            normalize_log_row(row)
        })
        .collect();
    (
        ClassPosterior::from_flat(k, values),
        normalizers.iter().sum(),
    )
}

/// E-step with the model's own class prior.
pub fn ds_posterior(table: &AnnotationTable, model: &ConfusionModel) -> (DsPosterior, f64) {
    e_step(table, model, Prior::Shared(&model.prior))
}

fn m_step(
    table: &AnnotationTable,
    responsibilities: &[f64],
    prior: &[f64],
    smoothing: f64,
) -> ConfusionModel {
    let k = table.num_classes();
    let confusion: Vec<f64> = (0..table.num_annotators())
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut counts = vec![smoothing; k * k];
            for &(i, label) in table.annotator_labels(j) {
                let resp = &responsibilities[i * k..(i + 1) * k];
                for (c, r) in resp.iter().enumerate() {
                    counts[c * k + label] += r;
                }
            }
            for row in counts.chunks_mut(k) {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|v| *v /= total);
                } else {
                    row.iter_mut().for_each(|v| *v = 1.0 / k as f64);
                }
            }
            counts
        })
        .collect();
    ConfusionModel {
        num_classes: k,
        confusion,
        prior: prior.to_vec(),
    }
}

fn log_penalty(model: &ConfusionModel, smoothing: f64) -> f64 {
    if smoothing == 0.0 {
        return 0.0;
    }
    smoothing * model.confusion.iter().map(|p| p.ln()).sum::<f64>()
}

/// Fits the confusion matrices by EM starting from one-hot majority-vote
/// responsibilities.
pub fn ds_fit(table: &AnnotationTable, config: &DsConfig) -> Result<DsFit> {
    if table.num_annotations() == 0 {
        return Err(Error::input("cannot fit Dawid-Skene on an empty table"));
    }
    table.ensure_valid()?;
    if config.smoothing < 0.0 || !config.tol.is_finite() || config.max_iter == 0 {
        return Err(Error::config(
            "Dawid-Skene needs max_iter >= 1, finite tol and non-negative smoothing",
        ));
    }
    let k = table.num_classes();
    let prior = table.label_marginal();

    let mut responsibilities = vec![0.0; table.num_examples() * k];
    for (i, label) in majority_vote(table).into_iter().enumerate() {
        responsibilities[i * k + label] = 1.0;
    }

    let mut log_likelihood = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut model = None;
    while iterations < config.max_iter {
        iterations += 1;
        let fitted = m_step(table, &responsibilities, &prior, config.smoothing);
        let (posterior, ll) = ds_posterior(table, &fitted);
        if !ll.is_finite() {
            return Err(Error::numerical(format!(
                "Dawid-Skene log-likelihood became {} at iteration {}",
                ll, iterations
            )));
        }
        log_likelihood.push(ll);
        objective.push(ll + log_penalty(&fitted, config.smoothing));
        let delta = posterior
            .values()
            .iter()
            .zip(&responsibilities)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        responsibilities = posterior.values().to_vec();
        model = Some(fitted);
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "Dawid-Skene did not converge within {} iterations",
            config.max_iter
        );
    }
    Ok(DsFit {
        model: model.expect("at least one iteration"),
        posterior: ClassPosterior::from_flat(k, responsibilities),
        iterations,
        converged,
        log_likelihood,
        objective,
    })
}

/// qᵢ = posterior[i][Ŷᵢ]
pub fn ds_consensus_quality(posterior: &DsPosterior, consensus: &[usize]) -> Vec<f64> {
    posterior.quality_for(consensus)
}

/// aⱼ = (1/K) Σₖ π⁽ʲ⁾[k][k]
pub fn ds_annotator_quality(model: &ConfusionModel) -> Vec<f64> {
    let k = model.num_classes();
    (0..model.num_annotators())
        .map(|j| (0..k).map(|c| model.entry(j, c, c)).sum::<f64>() / k as f64)
        .collect()
}

/// Adds the classifier as one more annotator labeling every example with its
/// argmax class. The new annotator has index `m`.
pub fn augment_with_model(table: &AnnotationTable, probs: &ProbMatrix) -> Result<AnnotationTable> {
    if probs.num_rows() != table.num_examples() {
        return Err(Error::input(format!(
            "probabilities cover {} examples, table has {}",
            probs.num_rows(),
            table.num_examples()
        )));
    }
    table.with_extra_annotator(&probs.hard_predictions())
}

/// Posterior using the classifier row as a per-example prior together with
/// fitted confusion matrices: ∝ p̂_M[i][k] · Π π⁽ʲ⁾[k][Yᵢⱼ].
pub fn empirical_bayes_posterior(
    table: &AnnotationTable,
    probs: &ProbMatrix,
    model: &ConfusionModel,
) -> Result<ClassPosterior> {
    if probs.num_rows() != table.num_examples() || probs.num_classes() != table.num_classes() {
        return Err(Error::input("probabilities do not match the table"));
    }
    if model.num_annotators() < table.num_annotators() {
        return Err(Error::input(
            "confusion model has fewer annotators than the table",
        ));
    }
    Ok(e_step(table, model, Prior::PerExample(probs)).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Annotation;
    use approx::assert_abs_diff_eq;

    fn table(k: usize, triples: &[(usize, usize, usize)]) -> AnnotationTable {
        let entries = triples
            .iter()
            .map(|&(i, j, l)| Annotation::new(i, j, l))
            .collect();
        AnnotationTable::from_entries(Some(k), entries).unwrap()
    }

    #[test]
    fn e_step_hand_example() {
        let t = table(2, &[(0, 0, 0), (0, 1, 0)]);
        let m = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let model = ConfusionModel::new(2, vec![m.clone(), m], vec![0.5, 0.5]).unwrap();
        let (post, _) = ds_posterior(&t, &model);
        assert_abs_diff_eq!(post.row(0)[0], 0.987805, epsilon = 1e-6);
        assert_abs_diff_eq!(post.row(0)[1], 0.012195, epsilon = 1e-6);
    }

    #[test]
    fn single_annotator_posterior_is_one_factor() {
        let t = table(2, &[(0, 0, 1), (1, 0, 0), (2, 0, 1)]);
        let fit = ds_fit(&t, &DsConfig::default()).unwrap();
        for i in 0..3 {
            let label = t.example_annotations(i)[0].1;
            let raw: Vec<f64> = (0..2)
                .map(|c| fit.model.prior()[c] * fit.model.entry(0, c, label))
                .collect();
            let z: f64 = raw.iter().sum();
            for c in 0..2 {
                assert_abs_diff_eq!(fit.posterior.row(i)[c], raw[c] / z, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_annotators_recover_identity() {
        let triples: Vec<_> = (0..100)
            .flat_map(|i| [(i, 0, i % 2), (i, 1, i % 2)])
            .collect();
        let t = table(2, &triples);
        let fit = ds_fit(&t, &DsConfig::default()).unwrap();
        for j in 0..2 {
            for c in 0..2 {
                assert!((fit.model.entry(j, c, c) - 1.0).abs() < 0.02);
            }
        }
        for i in 0..100 {
            assert!(fit.posterior.row(i)[i % 2] >= 0.97);
        }
    }

    #[test]
    fn annotator_quality_is_mean_diagonal() {
        let model = ConfusionModel::new(
            2,
            vec![
                vec![vec![0.9, 0.1], vec![0.3, 0.7]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let a = ds_annotator_quality(&model);
        assert_abs_diff_eq!(a[0], 0.8, epsilon = 1e-15);
        assert_eq!(a[1], 0.5);
    }

    #[test]
    fn augmentation_adds_one_annotator() {
        let t = table(2, &[(0, 0, 0), (1, 0, 1), (0, 1, 0)]);
        let p = ProbMatrix::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let aug = augment_with_model(&t, &p).unwrap();
        assert_eq!(aug.num_annotators(), 3);
        assert_eq!(aug.num_annotations(), t.num_annotations() + 2);
        assert_eq!(aug.annotator_labels(2), &[(0, 1), (1, 0)]);
        let twice = augment_with_model(&aug, &p).unwrap();
        assert_eq!(twice.num_annotators(), 4);
    }

    #[test]
    fn empirical_bayes_hand_example() {
        let t = table(2, &[(0, 0, 1)]);
        let model = ConfusionModel::new(
            2,
            vec![vec![vec![0.8, 0.2], vec![0.2, 0.8]]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let p = ProbMatrix::from_rows(vec![vec![0.7, 0.3]]).unwrap();
        let post = empirical_bayes_posterior(&t, &p, &model).unwrap();
        assert_abs_diff_eq!(post.row(0)[0], 0.368421, epsilon = 1e-6);
        assert_abs_diff_eq!(post.row(0)[1], 0.631579, epsilon = 1e-6);

        // A uniform classifier row reduces to the uniform-prior E-step.
        let uniform = ProbMatrix::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        let eb = empirical_bayes_posterior(&t, &uniform, &model).unwrap();
        let (ds, _) = ds_posterior(&t, &model);
        for c in 0..2 {
            assert_abs_diff_eq!(eb.row(0)[c], ds.row(0)[c], epsilon = 1e-15);
        }
    }

    #[test]
    fn log_sum_exp_handles_large_and_infinite_values() {
        assert_abs_diff_eq!(
            log_sum_exp(&[1000.0, 1000.0]),
            1000.0 + 2f64.ln(),
            epsilon = 1e-12
        );
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn fit_is_deterministic_and_objective_monotone() {
        let triples: Vec<_> = (0..60)
            .flat_map(|i| {
                [
                    (i, 0, i % 3),
                    (i, 1, if i % 5 == 0 { (i + 1) % 3 } else { i % 3 }),
                    (i, 2, if i % 4 == 0 { (i + 2) % 3 } else { i % 3 }),
                ]
            })
            .collect();
        let t = table(3, &triples);
        let a = ds_fit(&t, &DsConfig::default()).unwrap();
        let b = ds_fit(&t, &DsConfig::default()).unwrap();
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.model, b.model);
        for w in a.objective.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn empty_table_is_rejected() {
        let t = AnnotationTable::new(0, 2, 0, vec![]).unwrap();
        assert!(ds_fit(&t, &DsConfig::default()).is_err());
    }
}
