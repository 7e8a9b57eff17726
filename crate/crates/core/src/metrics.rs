//! Evaluation against ground truth: consensus accuracy, error detection
//! (AUROC, average precision, lift) and annotator ranking (Spearman).
//!
//! All methods emit quality scores where higher means better. Detection
//! metrics treat an incorrect consensus label as the positive class and rank
//! by `-quality`.

use std::cmp::Ordering;

use serde::Serialize;

use crate::dataset::AnnotationTable;
use crate::error::{Error, Result};

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::input(format!(
            "{}: length mismatch ({} vs {})",
            what, a, b
        )));
    }
    Ok(())
}

pub fn consensus_accuracy(truth: &[usize], consensus: &[usize]) -> Result<f64> {
    check_len(truth.len(), consensus.len(), "consensus accuracy")?;
    if truth.is_empty() {
        return Err(Error::input("consensus accuracy of an empty label set"));
    }
    let hits = truth.iter().zip(consensus).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `true` where the consensus label differs from the truth.
pub fn error_target(truth: &[usize], consensus: &[usize]) -> Vec<bool> {
    truth.iter().zip(consensus).map(|(t, c)| t != c).collect()
}

fn count_positives(quality: &[f64], errors: &[bool], what: &str) -> Result<usize> {
    check_len(quality.len(), errors.len(), what)?;
    if let Some(q) = quality.iter().find(|q| q.is_nan()) {
        return Err(Error::numerical(format!("{}: quality score {}", what, q)));
    }
    Ok(errors.iter().filter(|&&e| e).count())
}

/// Tie-aware average ranks (1-based) of `values` in ascending order.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end share rank (start+1 + end)/2.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Probability that a random error scores lower quality than a random
/// correct example, ties counting one half (Mann-Whitney U).
pub fn auroc(quality: &[f64], errors: &[bool]) -> Result<f64> {
    let positives = count_positives(quality, errors, "auroc")?;
    let negatives = errors.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::input(
            "auroc needs at least one incorrect and one correct consensus label",
        ));
    }
    let detection: Vec<f64> = quality.iter().map(|q| -q).collect();
    let ranks = average_ranks(&detection);
    let rank_sum: f64 = ranks
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Average precision Σ (Rₖ − Rₖ₋₁)·Pₖ over the list ranked by descending
/// detection score; tied scores enter as a single block.
pub fn auprc(quality: &[f64], errors: &[bool]) -> Result<f64> {
    let positives = count_positives(quality, errors, "auprc")?;
    if positives == 0 {
        return Err(Error::input(
            "auprc needs at least one incorrect consensus label",
        ));
    }
    let mut order: Vec<usize> = (0..quality.len()).collect();
    order.sort_by(|&a, &b| {
        quality[a]
            .partial_cmp(&quality[b])
            .unwrap_or(Ordering::Equal)
    });
    let total = positives as f64;
    let (mut seen, mut hits, mut ap) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && quality[order[end]] == quality[order[start]] {
            end += 1;
        }
        let block_hits = order[start..end].iter().filter(|&&i| errors[i]).count();
        seen += end - start;
        hits += block_hits;
        if block_hits > 0 {
            ap += (block_hits as f64 / total) * (hits as f64 / seen as f64);
        }
        start = end;
    }
    Ok(ap)
}

/// Precision among the `t` lowest-quality examples divided by the overall
/// error rate. Ties at the cutoff keep input order.
pub fn lift_at_t(quality: &[f64], errors: &[bool], t: usize) -> Result<f64> {
    let positives = count_positives(quality, errors, "lift")?;
    let n = quality.len();
    if t == 0 || t > n {
        return Err(Error::input(format!("lift cutoff {} outside 1..={}", t, n)));
    }
    if positives == 0 {
        return Err(Error::input(
            "lift needs at least one incorrect consensus label",
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // sort_by is stable, so equal scores keep input order.
    order.sort_by(|&a, &b| {
        quality[a]
            .partial_cmp(&quality[b])
            .unwrap_or(Ordering::Equal)
    });
    let caught = order[..t].iter().filter(|&&i| errors[i]).count();
    Ok((caught as f64 / t as f64) / (positives as f64 / n as f64))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "spearman")?;
    if a.len() < 2 {
        return Err(Error::input("spearman needs at least two values"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::numerical("spearman input contains NaN"));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::input("correlation undefined for a constant input"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// ACCⱼ: accuracy of each annotator's labels against the truth.
pub fn annotator_truth_accuracy(table: &AnnotationTable, truth: &[usize]) -> Result<Vec<f64>> {
    check_len(truth.len(), table.num_examples(), "annotator accuracy")?;
    Ok((0..table.num_annotators())
        .map(|j| {
            let labels = table.annotator_labels(j);
            if labels.is_empty() {
                return 0.0;
            }
            let hits = labels.iter().filter(|&&(i, l)| truth[i] == l).count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

/// Everything needed to evaluate one method.
#[derive(Debug, Clone)]
pub struct EvalInput<'a> {
    pub truth: &'a [usize],
    /// Labels whose quality is being scored.
    pub consensus: &'a [usize],
    pub quality: &'a [f64],
    pub annotator_scores: Option<&'a [f64]>,
    pub annotator_truth_acc: &'a [f64],
}

pub const DEFAULT_LIFT_CUTOFFS: [usize; 5] = [10, 50, 100, 300, 500];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftValue {
    pub cutoff: usize,
    /// `None` when the cutoff exceeds the number of examples or nothing is wrong.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub num_errors: usize,
    /// `None` when the scored labels are all correct or all wrong.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub lift: Vec<LiftValue>,
}

/// Error-detection metrics that degrade to `None` instead of failing on
/// degenerate targets.
pub fn detection_metrics(input: &EvalInput<'_>, cutoffs: &[usize]) -> Result<DetectionMetrics> {
    check_len(input.truth.len(), input.consensus.len(), "evaluation")?;
    check_len(input.truth.len(), input.quality.len(), "evaluation")?;
    let errors = error_target(input.truth, input.consensus);
    let num_errors = errors.iter().filter(|&&e| e).count();
    let n = errors.len();
    let defined = num_errors > 0 && num_errors < n;
    let auroc = if defined {
        Some(auroc(input.quality, &errors)?)
    } else {
        None
    };
    let auprc = if num_errors > 0 {
        Some(auprc(input.quality, &errors)?)
    } else {
        None
    };
    let lift = cutoffs
        .iter()
        .map(|&cutoff| {
            let value = if num_errors > 0 && cutoff >= 1 && cutoff <= n {
                Some(lift_at_t(input.quality, &errors, cutoff)?)
            } else {
                None
            };
            Ok(LiftValue { cutoff, value })
        })
        .collect::<Result<_>>()?;
    Ok(DetectionMetrics {
        num_errors,
        auroc,
        auprc,
        lift,
    })
}
