//! Seeded generator of synthetic multi-annotator datasets with ground truth.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with the 64-bit seed
//! of the config, so a given config always yields the same dataset. Stream 0
//! drives the dataset itself; stream 1 is reserved for the held-out draw used
//! to calibrate the simulated classifier.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, AnnotationTable, ProbMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountSpec {
    Fixed { count: usize },
    Uniform { min: usize, max: usize },
}

impl CountSpec {
    fn max(&self) -> usize {
        match *self {
            CountSpec::Fixed { count } => count,
            CountSpec::Uniform { max, .. } => max,
        }
    }

    fn min(&self) -> usize {
        match *self {
            CountSpec::Fixed { count } => count,
            CountSpec::Uniform { min, .. } => min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccuracySpec {
    Uniform { min: f64, max: f64 },
    Beta { a: f64, b: f64 },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Wrong labels spread uniformly over the other K−1 classes.
    #[default]
    Symmetric,
    /// Each annotator gets a random row-stochastic confusion matrix whose
    /// diagonal is their accuracy.
    Confusion,
}

/// Optional per-example difficulty: on a hard example each annotator first
/// picks the example's distractor class with probability `distractor_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultySpec {
    pub hard_fraction: f64,
    pub distractor_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(alias = "n")]
    pub num_examples: usize,
    #[serde(alias = "k")]
    pub num_classes: usize,
    #[serde(alias = "m")]
    pub num_annotators: usize,
    /// Uniform when absent.
    #[serde(default)]
    pub class_marginal: Option<Vec<f64>>,
    pub annotations_per_example: CountSpec,
    pub annotator_accuracy: AccuracySpec,
    #[serde(default)]
    pub noise_model: NoiseModel,
    /// Target argmax accuracy of the simulated classifier, in (1/K, 1).
    pub model_accuracy: f64,
    /// Multiplier on the logits before the softmax; larger is more confident.
    #[serde(default = "default_sharpness")]
    pub model_sharpness: f64,
    #[serde(default)]
    pub difficulty: Option<DifficultySpec>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sharpness() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Hardest,
    Uniform,
    Complete,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_end_matches("-like") {
            "hardest" => Ok(Regime::Hardest),
            "uniform" => Ok(Regime::Uniform),
            "complete" => Ok(Regime::Complete),
            other => Err(Error::config(format!("unknown regime preset '{}'", other))),
        }
    }
}

/// Preset configs for the three annotation regimes (n = 2000, K = 10 by default).
///
/// * `hardest`: 50 annotators of accuracy uniform in [0.35, 0.95], one to
///   three annotations per example.
/// * `uniform`: 100 annotators of accuracy uniform in [0.5, 0.95], one to
///   five annotations per example.
/// * `complete`: 100 annotators of accuracy uniform in [0.5, 0.98], 50
///   annotations per example, 5% ambiguous examples whose votes split
///   roughly evenly between a distractor class and the rest.
pub fn regime_preset(name: &str) -> Result<SimConfig> {
    Ok(Regime::from_str(name)?.config())
}

impl Regime {
    pub fn config(self) -> SimConfig {
        let base = SimConfig {
            num_examples: 2000,
            num_classes: 10,
            num_annotators: 50,
            class_marginal: None,
            annotations_per_example: CountSpec::Uniform { min: 1, max: 3 },
            annotator_accuracy: AccuracySpec::Uniform {
                min: 0.35,
                max: 0.95,
            },
            noise_model: NoiseModel::Symmetric,
            model_accuracy: 0.85,
            model_sharpness: default_sharpness(),
            difficulty: None,
            seed: 0,
        };
        match self {
            Regime::Hardest => base,
            Regime::Uniform => SimConfig {
                num_annotators: 100,
                annotations_per_example: CountSpec::Uniform { min: 1, max: 5 },
                annotator_accuracy: AccuracySpec::Uniform {
                    min: 0.5,
                    max: 0.95,
                },
                ..base
            },
            Regime::Complete => SimConfig {
                num_annotators: 100,
                annotations_per_example: CountSpec::Fixed { count: 50 },
                annotator_accuracy: AccuracySpec::Uniform {
                    min: 0.5,
                    max: 0.98,
                },
                difficulty: Some(DifficultySpec {
                    hard_fraction: 0.05,
                    distractor_prob: 0.45,
                }),
                ..base
            },
        }
    }
}

impl SimConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_examples(mut self, n: usize) -> Self {
        self.num_examples = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, m) = (self.num_examples, self.num_classes, self.num_annotators);
        if n == 0 || m == 0 {
            return Err(Error::config("need at least one example and one annotator"));
        }
        if k < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if let Some(marginal) = &self.class_marginal {
            if marginal.len() != k
                || marginal.iter().any(|p| !p.is_finite() || *p < 0.0)
                || (marginal.iter().sum::<f64>() - 1.0).abs() > 1e-6
            {
                return Err(Error::config(
                    "class_marginal must be a probability vector of length K",
                ));
            }
        }
        let counts = &self.annotations_per_example;
        if counts.min() == 0 || counts.min() > counts.max() {
            return Err(Error::config(
                "annotations_per_example must be at least 1 with min <= max",
            ));
        }
        if counts.max() > m {
            return Err(Error::config(format!(
                "infeasible config: {} annotations per example but only {} annotators",
                counts.max(),
                m
            )));
        }
        match &self.annotator_accuracy {
            AccuracySpec::Uniform { min, max } => {
                if !(0.0..=1.0).contains(min) || !(0.0..=1.0).contains(max) || min > max {
                    return Err(Error::config(
                        "accuracy range must lie in [0, 1] with min <= max",
                    ));
                }
            }
            AccuracySpec::Beta { a, b } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return Err(Error::config("beta parameters must be positive"));
                }
            }
            AccuracySpec::Explicit { values } => {
                if values.len() != m || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::config(
                        "explicit accuracies need one value in [0, 1] per annotator",
                    ));
                }
            }
        }
        let chance = 1.0 / k as f64;
        if !(self.model_accuracy > chance && self.model_accuracy < 1.0) {
            return Err(Error::config(format!(
                "model_accuracy must lie in ({}, 1)",
                chance
            )));
        }
        if !(self.model_sharpness > 0.0 && self.model_sharpness.is_finite()) {
            return Err(Error::config("model_sharpness must be positive"));
        }
        if let Some(d) = &self.difficulty {
            if !(0.0..=1.0).contains(&d.hard_fraction) || !(0.0..=1.0).contains(&d.distractor_prob)
            {
                return Err(Error::config("difficulty fractions must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub table: AnnotationTable,
    pub truth: Vec<usize>,
    pub probs: ProbMatrix,
    /// Fraction of each annotator's labels that equal the truth.
    pub true_annotator_acc: Vec<f64>,
    /// Accuracy parameter each annotator was drawn with.
    pub annotator_accuracy_params: Vec<f64>,
    /// Generating confusion matrix of each annotator (K×K, row = true class).
    pub confusions: Vec<Vec<Vec<f64>>>,
    /// Examples that were drawn as hard.
    pub hard: Vec<bool>,
    pub config: SimConfig,
}

impl SimDataset {
    /// Argmax accuracy of the simulated classifier.
    pub fn model_accuracy(&self) -> f64 {
        let hits = (0..self.truth.len())
            .filter(|&i| self.probs.argmax(i) == self.truth[i])
            .count();
        hits as f64 / self.truth.len() as f64
    }
}

fn draw_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn draw_accuracies(rng: &mut ChaCha8Rng, spec: &AccuracySpec, m: usize) -> Result<Vec<f64>> {
    Ok(match spec {
        AccuracySpec::Uniform { min, max } => (0..m)
            .map(|_| min + (max - min) * rng.random::<f64>())
            .collect(),
        AccuracySpec::Beta { a, b } => {
            let dist = Beta::new(*a, *b).map_err(|e| Error::config(e.to_string()))?;
            (0..m).map(|_| dist.sample(rng)).collect()
        }
        AccuracySpec::Explicit { values } => values.clone(),
    })
}

fn confusion_matrix(
    rng: &mut ChaCha8Rng,
    accuracy: f64,
    k: usize,
    noise: NoiseModel,
) -> Vec<Vec<f64>> {
    (0..k)
        .map(|truth| {
            let mut row = vec![0.0; k];
            match noise {
                NoiseModel::Symmetric => {
                    row.iter_mut()
                        .for_each(|v| *v = (1.0 - accuracy) / (k - 1) as f64);
                }
                NoiseModel::Confusion => {
                    let draws: Vec<f64> = (0..k - 1).map(|_| Exp1.sample(rng)).collect();
                    let total: f64 = draws.iter().sum();
                    let mut it = draws.iter();
                    for (c, v) in row.iter_mut().enumerate() {
                        if c != truth {
                            *v = (1.0 - accuracy) * it.next().unwrap() / total;
                        }
                    }
                }
            }
            row[truth] = accuracy;
            row
        })
        .collect()
}

fn normal_logits(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

/// Boost added to the true-class logit so that the argmax hits `target`
/// accuracy, found by bisection on a fixed held-out draw.
fn calibrate_boost(seed: u64, k: usize, target: f64) -> f64 {
    const DRAWS: usize = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    // Margin of the true class over the best competitor at zero boost.
    let mut margins: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let z = normal_logits(&mut rng, k);
            let best_other = z[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            best_other - z[0]
        })
        .collect();
    margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let accuracy = |boost: f64| margins.partition_point(|&m| m < boost) as f64 / DRAWS as f64;
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if accuracy(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn softmax(logits: &[f64], sharpness: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) * sharpness).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn simulate(config: &SimConfig) -> Result<SimDataset> {
    config.validate()?;
    let (n, k, m) = (
        config.num_examples,
        config.num_classes,
        config.num_annotators,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let accuracies = draw_accuracies(&mut rng, &config.annotator_accuracy, m)?;
    let confusions: Vec<Vec<Vec<f64>>> = accuracies
        .iter()
        .map(|&a| confusion_matrix(&mut rng, a, k, config.noise_model))
        .collect();
    let marginal = config
        .class_marginal
        .clone()
        .unwrap_or_else(|| vec![1.0 / k as f64; k]);

    let boost = calibrate_boost(config.seed, k, config.model_accuracy);

    let mut truth = Vec::with_capacity(n);
    let mut hard = Vec::with_capacity(n);
    let mut entries = Vec::new();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let y = draw_categorical(&mut rng, &marginal);
        truth.push(y);

        let distractor = match config.difficulty {
            Some(d) if rng.random::<f64>() < d.hard_fraction => {
                let other = rng.random_range(0..k - 1);
                Some((
                    if other >= y { other + 1 } else { other },
                    d.distractor_prob,
                ))
            }
            _ => None,
        };
        hard.push(distractor.is_some());

        let count = match config.annotations_per_example {
            CountSpec::Fixed { count } => count,
            CountSpec::Uniform { min, max } => rng.random_range(min..=max),
        };
        let mut annotators = sample(&mut rng, m, count).into_vec();
        annotators.sort_unstable();
        for j in annotators {
            let label = match distractor {
                Some((d, p)) if rng.random::<f64>() < p => d,
                _ => draw_categorical(&mut rng, &confusions[j][y]),
            };
            entries.push(Annotation::new(i, j, label));
        }

        let mut logits = normal_logits(&mut rng, k);
        // Put the boosted draw for the true class in slot y, keeping the
        // calibration's convention that slot 0 is the true class.
        logits.swap(0, y);
        logits[y] += boost;
        rows.push(softmax(&logits, config.model_sharpness));
    }

    let table = AnnotationTable::new(n, k, m, entries)?;
    let probs = ProbMatrix::from_rows(rows)?;
    let true_annotator_acc = (0..m)
        .map(|j| {
            let labels = table.annotator_labels(j);
            if labels.is_empty() {
                return 0.0;
            }
            let hits = labels.iter().filter(|&&(i, l)| truth[i] == l).count();
            hits as f64 / labels.len() as f64
        })
        .collect();

    Ok(SimDataset {
        table,
        truth,
        probs,
        true_annotator_acc,
        annotator_accuracy_params: accuracies,
        confusions,
        hard,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            num_examples: 300,
            num_classes: 3,
            num_annotators: 8,
            class_marginal: None,
            annotations_per_example: CountSpec::Uniform { min: 1, max: 4 },
            annotator_accuracy: AccuracySpec::Uniform { min: 0.5, max: 0.9 },
            noise_model: NoiseModel::Confusion,
            model_accuracy: 0.8,
            model_sharpness: 2.0,
            difficulty: None,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.probs, b.probs);
        let c = simulate(&small().with_seed(8)).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn perfect_annotator_is_always_right() {
        let mut cfg = small();
        cfg.annotator_accuracy = AccuracySpec::Explicit {
            values: vec![1.0, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6],
        };
        let sim = simulate(&cfg).unwrap();
        assert_eq!(sim.true_annotator_acc[0], 1.0);
    }

    #[test]
    fn model_accuracy_hits_target() {
        let cfg = SimConfig {
            num_examples: 10_000,
            num_classes: 10,
            num_annotators: 5,
            annotations_per_example: CountSpec::Fixed { count: 1 },
            model_accuracy: 0.85,
            ..small()
        };
        let sim = simulate(&cfg).unwrap();
        assert!(
            (sim.model_accuracy() - 0.85).abs() < 0.02,
            "{}",
            sim.model_accuracy()
        );
    }

    #[test]
    fn every_example_is_annotated() {
        for name in ["hardest", "uniform", "complete"] {
            let cfg = regime_preset(name).unwrap().with_examples(200);
            let sim = simulate(&cfg).unwrap();
            assert!((0..200).all(|i| sim.table.annotation_count(i) >= 1));
        }
    }

    #[test]
    fn presets() {
        assert_eq!(
            regime_preset("uniform").unwrap().annotations_per_example,
            CountSpec::Uniform { min: 1, max: 5 }
        );
        assert_eq!(
            regime_preset("complete-like")
                .unwrap()
                .annotations_per_example,
            CountSpec::Fixed { count: 50 }
        );
        let hardest = regime_preset("hardest").unwrap();
        assert_eq!(hardest.num_examples, 2000);
        assert_eq!(hardest.num_classes, 10);
        assert!(regime_preset("easy").is_err());
    }

    #[test]
    fn hardest_preset_has_many_weak_annotators() {
        let sim = simulate(&regime_preset("hardest").unwrap()).unwrap();
        let weak = sim.true_annotator_acc.iter().filter(|&&a| a < 0.65).count();
        assert!(weak >= 15, "only {} annotators below 0.65", weak);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut cfg = small();
        cfg.annotations_per_example = CountSpec::Fixed { count: 9 };
        assert!(simulate(&cfg).is_err());
        let mut cfg = small();
        cfg.model_accuracy = 0.2;
        assert!(simulate(&cfg).is_err());
    }

    #[test]
    fn confusion_rows_are_stochastic_with_given_diagonal() {
        let sim = simulate(&small()).unwrap();
        for (j, m) in sim.confusions.iter().enumerate() {
            for (c, row) in m.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[c], sim.annotator_accuracy_params[j]);
            }
        }
    }

    #[test]
    fn realized_accuracy_converges() {
        let cfg = SimConfig {
            num_examples: 4000,
            num_annotators: 4,
            annotations_per_example: CountSpec::Fixed { count: 2 },
            annotator_accuracy: AccuracySpec::Explicit {
                values: vec![0.9, 0.7, 0.5, 0.4],
            },
            ..small()
        };
        let sim = simulate(&cfg).unwrap();
        for j in 0..4 {
            let labeled = sim.table.annotator_labels(j).len() as f64;
            assert!(labeled >= 500.0);
            let p = sim.annotator_accuracy_params[j];
            let sd = (p * (1.0 - p) / labeled).sqrt();
            assert!((sim.true_annotator_acc[j] - p).abs() < 4.0 * sd);
        }
    }
}
