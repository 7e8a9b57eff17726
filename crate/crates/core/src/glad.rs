//! GLAD: annotator ability α and example difficulty β fitted by EM.
//!
//! An annotator picks the true class with probability σ(αⱼβᵢ) and spreads the
//! remaining mass evenly over the other K−1 classes. β is kept positive by
//! optimizing log β. Gaussian penalties α ~ N(1, 1/λ) and log β ~ N(1, 1/λ)
//! (λ = `prior_strength`) keep the fit finite on unanimous data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AnnotationTable;
use crate::dawid_skene::normalize_log_row;
use crate::error::{Error, Result};
use crate::posterior::ClassPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GladConfig {
    pub max_iter: usize,
    /// Stop once the penalized log-likelihood changes by less than this.
    pub tol: f64,
    /// Gradient steps per M-step.
    pub m_step_iters: usize,
    /// Precision λ of the Gaussian penalties on α and log β.
    pub prior_strength: f64,
}

impl Default for GladConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-4,
            m_step_iters: 25,
            prior_strength: 1.0,
        }
    }
}

const PRIOR_MEAN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GladParams {
    pub alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
}

impl GladParams {
    pub fn initial(num_examples: usize, num_annotators: usize) -> Self {
        Self {
            alpha: vec![1.0; num_annotators],
            log_beta: vec![0.0; num_examples],
        }
    }

    pub fn beta(&self, example: usize) -> f64 {
        self.log_beta[example].exp()
    }
}

#[derive(Debug, Clone)]
pub struct GladModel {
    pub params: GladParams,
    pub posterior: ClassPosterior,
    pub prior: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after the initial E-step and after every iteration.
    pub log_likelihood: Vec<f64>,
    /// Log-likelihood plus the Gaussian log-penalties.
    pub objective: Vec<f64>,
}

impl GladModel {
    pub fn alpha(&self) -> &[f64] {
        &self.params.alpha
    }

    pub fn log_beta(&self) -> &[f64] {
        &self.params.log_beta
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x)
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// ln(1 + eˣ)
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Posterior ∝ prior[k] · Π_{j∈𝒥ᵢ} [σ(αⱼβᵢ) if Yᵢⱼ = k else (1 − σ(αⱼβᵢ))/(K − 1)],
/// computed in log space. Returns the posterior and the log-likelihood.
pub fn glad_posterior(
    table: &AnnotationTable,
    params: &GladParams,
    prior: &[f64],
) -> (ClassPosterior, f64) {
    let k = table.num_classes();
    let log_spread = ((k - 1) as f64).ln();
    let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let mut values = vec![0.0; table.num_examples() * k];
    let normalizers: Vec<f64> = values
        .par_chunks_mut(k)
        .enumerate()
        .map(|(i, row)| {
            row.copy_from_slice(&log_prior);
            let beta = params.beta(i);
            let mut wrong_total = 0.0;
            for &(j, label) in table.example_annotations(i) {
                let x = params.alpha[j] * beta;
                // log σ(x) − [log(1 − σ(x)) − log(K−1)] = x + log(K−1)
                wrong_total += -softplus(x) - log_spread;
                row[label] += x + log_spread;
            }
            row.iter_mut().for_each(|r| *r += wrong_total);
            normalize_log_row(row)
        })
        .collect();
    (
        ClassPosterior::from_flat(k, values),
        normalizers.iter().sum(),
    )
}

fn log_penalty(params: &GladParams, strength: f64) -> f64 {
    let sq = |v: &f64| (v - PRIOR_MEAN) * (v - PRIOR_MEAN);
    -0.5 * strength
        * (params.alpha.iter().map(sq).sum::<f64>() + params.log_beta.iter().map(sq).sum::<f64>())
}

/// Expected complete-data log-likelihood under `posterior` plus the Gaussian
/// log-penalties (constant prior terms dropped).
pub fn glad_expected_objective(
    table: &AnnotationTable,
    posterior: &ClassPosterior,
    params: &GladParams,
    prior_strength: f64,
) -> f64 {
    let log_spread = ((table.num_classes() - 1) as f64).ln();
    let per_example: Vec<f64> = (0..table.num_examples())
        .into_par_iter()
        .map(|i| {
            let beta = params.beta(i);
            let row = posterior.row(i);
            table
                .example_annotations(i)
                .iter()
                .map(|&(j, label)| {
                    let x = params.alpha[j] * beta;
                    let t = row[label];
                    t * log_sigmoid(x) + (1.0 - t) * (-softplus(x) - log_spread)
                })
                .sum::<f64>()
        })
        .collect();
    per_example.iter().sum::<f64>() + log_penalty(params, prior_strength)
}

/// Analytic gradient of [`glad_expected_objective`] with respect to α and log β.
pub fn glad_gradient(
    table: &AnnotationTable,
    posterior: &ClassPosterior,
    params: &GladParams,
    prior_strength: f64,
) -> GladParams {
    let alpha = (0..table.num_annotators())
        .into_par_iter()
        .map(|j| {
            let a = params.alpha[j];
            table
                .annotator_labels(j)
                .iter()
                .map(|&(i, label)| {
                    let beta = params.beta(i);
                    (posterior.row(i)[label] - sigmoid(a * beta)) * beta
                })
                .sum::<f64>()
                - prior_strength * (a - PRIOR_MEAN)
        })
        .collect();
    let log_beta = (0..table.num_examples())
        .into_par_iter()
        .map(|i| {
            let beta = params.beta(i);
            let row = posterior.row(i);
            table
                .example_annotations(i)
                .iter()
                .map(|&(j, label)| {
                    let x = params.alpha[j] * beta;
                    (row[label] - sigmoid(x)) * x
                })
                .sum::<f64>()
                - prior_strength * (params.log_beta[i] - PRIOR_MEAN)
        })
        .collect();
    GladParams { alpha, log_beta }
}

/// Diagonal curvature bounds used to scale the gradient step.
fn curvature(table: &AnnotationTable, params: &GladParams, prior_strength: f64) -> GladParams {
    let alpha = (0..table.num_annotators())
        .map(|j| {
            table
                .annotator_labels(j)
                .iter()
                .map(|&(i, _)| params.beta(i).powi(2) / 4.0)
                .sum::<f64>()
                + prior_strength
        })
        .collect();
    let log_beta = (0..table.num_examples())
        .map(|i| {
            let beta = params.beta(i);
            table
                .example_annotations(i)
                .iter()
                .map(|&(j, _)| {
                    let x = params.alpha[j] * beta;
                    x * x / 4.0 + x.abs()
                })
                .sum::<f64>()
                + prior_strength
        })
        .collect();
    GladParams { alpha, log_beta }
}

/// Gradient ascent on the expected objective with step halving. Every
/// accepted step does not decrease the objective.
fn m_step(
    table: &AnnotationTable,
    posterior: &ClassPosterior,
    mut params: GladParams,
    config: &GladConfig,
) -> GladParams {
    let mut current = glad_expected_objective(table, posterior, &params, config.prior_strength);
    for _ in 0..config.m_step_iters {
        let grad = glad_gradient(table, posterior, &params, config.prior_strength);
        let scale = curvature(table, &params, config.prior_strength);
        let direction = GladParams {
            alpha: grad
                .alpha
                .iter()
                .zip(&scale.alpha)
                .map(|(g, h)| g / h)
                .collect(),
            log_beta: grad
                .log_beta
                .iter()
                .zip(&scale.log_beta)
                .map(|(g, h)| g / h)
                .collect(),
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = GladParams {
                alpha: params
                    .alpha
                    .iter()
                    .zip(&direction.alpha)
                    .map(|(a, d)| a + step * d)
                    .collect(),
                log_beta: params
                    .log_beta
                    .iter()
                    .zip(&direction.log_beta)
                    .map(|(b, d)| b + step * d)
                    .collect(),
            };
            let value =
                glad_expected_objective(table, posterior, &candidate, config.prior_strength);
            if value.is_finite() && value > current {
                params = candidate;
                current = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    params
}

pub fn glad_fit(table: &AnnotationTable, config: &GladConfig) -> Result<GladModel> {
    if table.num_annotations() == 0 {
        return Err(Error::input("cannot fit GLAD on an empty table"));
    }
    table.ensure_valid()?;
    if table.num_classes() < 2 {
        return Err(Error::input("GLAD needs at least two classes"));
    }
    if config.max_iter == 0 || !config.tol.is_finite() || config.prior_strength < 0.0 {
        return Err(Error::config(
            "GLAD needs max_iter >= 1, finite tol and non-negative prior_strength",
        ));
    }
    let prior = table.label_marginal();
    let mut params = GladParams::initial(table.num_examples(), table.num_annotators());
    let (mut posterior, ll) = glad_posterior(table, &params, &prior);
    let mut log_likelihood = vec![ll];
    let mut objective = vec![ll + log_penalty(&params, config.prior_strength)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        params = m_step(table, &posterior, params, config);
        let (next, ll) = glad_posterior(table, &params, &prior);
        if !ll.is_finite() {
            return Err(Error::numerical(format!(
                "GLAD log-likelihood became {} at iteration {}",
                ll, iterations
            )));
        }
        posterior = next;
        let obj = ll + log_penalty(&params, config.prior_strength);
        let change = (obj - objective.last().copied().unwrap_or(f64::NEG_INFINITY)).abs();
        log_likelihood.push(ll);
        objective.push(obj);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "GLAD did not converge within {} iterations",
            config.max_iter
        );
    }
    debug_assert!(params.log_beta.iter().all(|b| b.exp() > 0.0));
    Ok(GladModel {
        params,
        posterior,
        prior,
        iterations,
        converged,
        log_likelihood,
        objective,
    })
}

/// qᵢ = posterior[i][Ŷᵢ]
pub fn glad_consensus_quality(model: &GladModel, consensus: &[usize]) -> Vec<f64> {
    model.posterior.quality_for(consensus)
}

/// aⱼ = αⱼ (unbounded).
pub fn glad_annotator_quality(model: &GladModel) -> Vec<f64> {
    model.params.alpha.clone()
}
