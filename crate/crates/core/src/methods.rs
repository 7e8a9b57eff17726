//! One entry point for every aggregation method.
//!
//! | method | consensus | consensus quality | annotator quality |
//! |---|---|---|---|
//! | `majority` | majority vote | agreement fraction | agreement with majority vote over all labels |
//! | `agreement` | majority vote | agreement fraction | agreement on multiply-annotated examples |
//! | `label-quality` | majority vote | classifier self-confidence | mean self-confidence of own labels |
//! | `crowdlab` | ensemble argmax | ensemble self-confidence | blend of label quality and agreement |
//! | `crowdlab-npw` | pooled-ensemble argmax | pooled-ensemble self-confidence | blend with one shared weight |
//! | `dawid-skene` | posterior argmax | posterior self-confidence | mean confusion diagonal |
//! | `dawid-skene-model` | as above, classifier added as annotator | | |
//! | `glad` | posterior argmax | posterior self-confidence | ability α |
//! | `glad-model` | as above, classifier added as annotator | | |
//! | `empirical-bayes` | posterior argmax, classifier row as prior | posterior self-confidence | mean confusion diagonal |
//! | `active-label-cleaning` | majority vote | negated entropy gap | none |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crowdlab::{crowdlab_score, npw_score};
use crate::dataset::{majority_vote, AnnotationTable, ClassFrequencies, ProbMatrix};
use crate::dawid_skene::{
    augment_with_model, ds_annotator_quality, ds_fit, empirical_bayes_posterior, DsConfig,
};
use crate::error::{Error, Result};
use crate::glad::{glad_annotator_quality, glad_fit, GladConfig};
use crate::label_quality::{
    agreement_annotator_quality, agreement_consensus_quality, agreement_on_all,
    alc_consensus_quality, lqs_annotator_quality,
};
use crate::posterior::ClassPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Majority,
    Agreement,
    LabelQuality,
    Crowdlab,
    CrowdlabNpw,
    DawidSkene,
    DawidSkeneModel,
    Glad,
    GladModel,
    EmpiricalBayes,
    ActiveLabelCleaning,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Majority,
        Method::Agreement,
        Method::LabelQuality,
        Method::Crowdlab,
        Method::CrowdlabNpw,
        Method::DawidSkene,
        Method::DawidSkeneModel,
        Method::Glad,
        Method::GladModel,
        Method::EmpiricalBayes,
        Method::ActiveLabelCleaning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Majority => "majority",
            Method::Agreement => "agreement",
            Method::LabelQuality => "label-quality",
            Method::Crowdlab => "crowdlab",
            Method::CrowdlabNpw => "crowdlab-npw",
            Method::DawidSkene => "dawid-skene",
            Method::DawidSkeneModel => "dawid-skene-model",
            Method::Glad => "glad",
            Method::GladModel => "glad-model",
            Method::EmpiricalBayes => "empirical-bayes",
            Method::ActiveLabelCleaning => "active-label-cleaning",
        }
    }

    /// Whether the method reads classifier probabilities.
    pub fn needs_probs(self) -> bool {
        !matches!(
            self,
            Method::Majority | Method::Agreement | Method::DawidSkene | Method::Glad
        )
    }

    pub fn has_annotator_scores(self) -> bool {
        self != Method::ActiveLabelCleaning
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown method '{}' (expected one of: {})",
                    s,
                    names.join(", ")
                ))
            })
    }
}

/// Hyperparameters of the iterative methods.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub dawid_skene: DsConfig,
    pub glad: GladConfig,
}

/// Fitted scalars worth recording next to the outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub likelihood_param: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlc_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_share: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_annotator_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
}

/// How a method assigns quality to an arbitrary set of labels.
#[derive(Debug, Clone)]
enum LabelScorer {
    Posterior(ClassPosterior),
    Agreement,
    /// Quality that does not depend on the labels being scored.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub consensus: Vec<usize>,
    pub quality: Vec<f64>,
    /// One score per annotator of the input table; `None` for active-label-cleaning.
    pub annotator_scores: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
    scorer: LabelScorer,
}

impl MethodResult {
    /// Quality of externally supplied labels (e.g. majority vote) under this
    /// method's fitted state.
    pub fn score_labels(&self, table: &AnnotationTable, labels: &[usize]) -> Result<Vec<f64>> {
        if labels.len() != table.num_examples() {
            return Err(Error::input(format!(
                "expected {} labels, got {}",
                table.num_examples(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= table.num_classes()) {
            return Err(Error::input(format!("label {} out of range", l)));
        }
        Ok(match &self.scorer {
            LabelScorer::Posterior(post) => post.quality_for(labels),
            LabelScorer::Agreement => agreement_consensus_quality(table, labels),
            LabelScorer::Fixed(q) => q.clone(),
        })
    }

    /// Posterior class probabilities, for methods that produce them.
    pub fn posterior(&self) -> Option<&ClassPosterior> {
        match &self.scorer {
            LabelScorer::Posterior(p) => Some(p),
            _ => None,
        }
    }
}

fn require_probs(method: Method, probs: Option<&ProbMatrix>) -> Result<&ProbMatrix> {
    probs.ok_or_else(|| {
        Error::config(format!(
            "method '{}' needs classifier probabilities",
            method
        ))
    })
}

fn check_shape(table: &AnnotationTable, probs: &ProbMatrix) -> Result<()> {
    if probs.num_rows() != table.num_examples() || probs.num_classes() != table.num_classes() {
        return Err(Error::input(format!(
            "probabilities are {}x{} but the table has {} examples and {} classes",
            probs.num_rows(),
            probs.num_classes(),
            table.num_examples(),
            table.num_classes()
        )));
    }
    Ok(())
}

fn from_posterior(
    method: Method,
    table: &AnnotationTable,
    posterior: ClassPosterior,
    annotator_scores: Vec<f64>,
    diagnostics: Diagnostics,
) -> Result<MethodResult> {
    let consensus = posterior.consensus(&ClassFrequencies::from_table(table))?;
    let quality = posterior.quality_for(&consensus);
    Ok(MethodResult {
        method,
        consensus,
        quality,
        annotator_scores: Some(annotator_scores),
        diagnostics,
        scorer: LabelScorer::Posterior(posterior),
    })
}

pub fn run(
    method: Method,
    table: &AnnotationTable,
    probs: Option<&ProbMatrix>,
    config: &MethodConfig,
) -> Result<MethodResult> {
    table.ensure_valid()?;
    if method.needs_probs() {
        check_shape(table, require_probs(method, probs)?)?;
    }
    let m = table.num_annotators();
    match method {
        Method::Majority | Method::Agreement => {
            let consensus = majority_vote(table);
            let quality = agreement_consensus_quality(table, &consensus);
            let scores = if method == Method::Majority {
                (0..m)
                    .map(|j| agreement_on_all(table, &consensus, j))
                    .collect()
            } else {
                agreement_annotator_quality(table, &consensus)
            };
            Ok(MethodResult {
                method,
                consensus,
                quality,
                annotator_scores: Some(scores),
                diagnostics: Diagnostics::default(),
                scorer: LabelScorer::Agreement,
            })
        }
        Method::LabelQuality => {
            let probs = require_probs(method, probs)?;
            let posterior = ClassPosterior::from_flat(probs.num_classes(), probs.values().to_vec());
            let consensus = majority_vote(table);
            let quality = posterior.quality_for(&consensus);
            Ok(MethodResult {
                method,
                consensus,
                quality,
                annotator_scores: Some(lqs_annotator_quality(table, probs)),
                diagnostics: Diagnostics::default(),
                scorer: LabelScorer::Posterior(posterior),
            })
        }
        Method::Crowdlab => {
            let out = crowdlab_score(table, require_probs(method, probs)?)?;
            let diagnostics = Diagnostics {
                likelihood_param: Some(out.weights.likelihood_param),
                model_weight: Some(out.weights.model),
                model_accuracy: Some(out.weights.model_accuracy),
                mlc_accuracy: Some(out.weights.mlc_accuracy),
                model_share: Some(out.annotator_parts.model_share),
                ..Diagnostics::default()
            };
            Ok(MethodResult {
                method,
                consensus: out.consensus.labels(),
                quality: out.consensus.quality(),
                annotator_scores: Some(out.annotator_parts.scores),
                diagnostics,
                scorer: LabelScorer::Posterior(out.posterior),
            })
        }
        Method::CrowdlabNpw => {
            let out = npw_score(table, require_probs(method, probs)?)?;
            let diagnostics = Diagnostics {
                model_weight: Some(out.model_weight),
                model_accuracy: Some(out.model_accuracy),
                model_share: Some(out.model_share),
                mean_annotator_accuracy: Some(out.mean_annotator_accuracy),
                ..Diagnostics::default()
            };
            Ok(MethodResult {
                method,
                consensus: out.consensus.labels(),
                quality: out.consensus.quality(),
                annotator_scores: Some(out.annotators.scores()),
                diagnostics,
                scorer: LabelScorer::Posterior(out.posterior),
            })
        }
        Method::DawidSkene | Method::DawidSkeneModel | Method::EmpiricalBayes => {
            let augmented;
            let fit_table = if method == Method::DawidSkeneModel {
                augmented = augment_with_model(table, require_probs(method, probs)?)?;
                &augmented
            } else {
                table
            };
            let fit = ds_fit(fit_table, &config.dawid_skene)?;
            let diagnostics = Diagnostics {
                iterations: Some(fit.iterations),
                converged: Some(fit.converged),
                log_likelihood: fit.log_likelihood.last().copied(),
                ..Diagnostics::default()
            };
            let model = fit.model.truncated(m);
            let posterior = if method == Method::EmpiricalBayes {
                empirical_bayes_posterior(table, require_probs(method, probs)?, &model)?
            } else {
                fit.posterior
            };
            from_posterior(
                method,
                table,
                posterior,
                ds_annotator_quality(&model),
                diagnostics,
            )
        }
        Method::Glad | Method::GladModel => {
            let augmented;
            let fit_table = if method == Method::GladModel {
                augmented = augment_with_model(table, require_probs(method, probs)?)?;
                &augmented
            } else {
                table
            };
            let model = glad_fit(fit_table, &config.glad)?;
            let diagnostics = Diagnostics {
                iterations: Some(model.iterations),
                converged: Some(model.converged),
                log_likelihood: model.log_likelihood.last().copied(),
                ..Diagnostics::default()
            };
            let mut scores = glad_annotator_quality(&model);
            scores.truncate(m);
            from_posterior(method, table, model.posterior, scores, diagnostics)
        }
        Method::ActiveLabelCleaning => {
            let quality = alc_consensus_quality(table, require_probs(method, probs)?);
            Ok(MethodResult {
                method,
                consensus: majority_vote(table),
                quality: quality.clone(),
                annotator_scores: None,
                diagnostics: Diagnostics::default(),
                scorer: LabelScorer::Fixed(quality),
            })
        }
    }
}
