//! Episode metrics: pooled ranking AUC and macro-F1 over the episode classes.

use serde::{Deserialize, Serialize};

/// Fraction of (positive, negative) pairs in which the positive scores
/// strictly higher, ties counting one half. `None` when either class is absent.
///
/// Computed from average ranks, O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// F1 with the zero-denominator case scored 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Mean over the `n` episode classes of each class's binary F1 across all queries.
pub fn macro_f1(predicted: &[Vec<bool>], labels: &[Vec<bool>], n: usize) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|class| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, l) in predicted.iter().zip(labels) {
                match (p[class], l[class]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            f1_from_counts(tp, fp, fn_)
        })
        .sum();
    total / n as f64
}

/// Per-instance F1 between a predicted and a true label mask; an empty
/// prediction scores 0.
pub fn instance_f1(predicted: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdMode {
    Static { tau: f64 },
    /// Per-query mode of the learned Beta policy.
    Dynamic,
}

/// Per-query outputs and summary metrics of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
    pub predicted: Vec<Vec<bool>>,
    /// Threshold used for each query.
    pub thresholds: Vec<f64>,
    pub auc: Option<f64>,
    pub macro_f1: f64,
    pub threshold_mode: ThresholdMode,
}

impl EpisodeReport {
    pub fn new(
        scores: Vec<Vec<f64>>,
        labels: Vec<Vec<bool>>,
        thresholds: Vec<f64>,
        threshold_mode: ThresholdMode,
    ) -> Self {
        let n = labels.first().map_or(0, Vec::len);
        let predicted: Vec<Vec<bool>> = scores
            .iter()
            .zip(&thresholds)
            .map(|(s, &t)| apply_threshold(s, t))
            .collect();
        let flat_scores: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_labels: Vec<bool> = labels.iter().flatten().copied().collect();
        EpisodeReport {
            auc: auc(&flat_scores, &flat_labels),
            macro_f1: macro_f1(&predicted, &labels, n),
            scores,
            labels,
            predicted,
            thresholds,
            threshold_mode,
        }
    }
}

/// Classes whose score reaches the threshold (`ŷ_i ≥ τ`); may be empty.
pub fn apply_threshold(scores: &[f64], tau: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= tau).collect()
}

/// Episode-averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_auc: f64,
    pub mean_macro_f1: f64,
    pub episode_auc: Vec<f64>,
    pub episode_macro_f1: Vec<f64>,
    /// Episodes whose AUC was undefined and left out of `mean_auc`.
    pub skipped_auc: usize,
}

impl EvalSummary {
    pub fn from_reports(reports: &[EpisodeReport]) -> Self {
        let episode_auc: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
        let skipped_auc = reports.len() - episode_auc.len();
        if skipped_auc > 0 {
            log::warn!("{skipped_auc} episodes had an undefined AUC and were skipped");
        }
        let episode_macro_f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
        EvalSummary {
            mean_auc: mean(&episode_auc),
            mean_macro_f1: mean(&episode_macro_f1),
            episode_auc,
            episode_macro_f1,
            skipped_auc,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
