//! Prediction and calibration metrics: non-interpolated AU-PR, AU-ROC,
//! unweighted-average F1 at threshold 0.5, ECE with ten buckets, and
//! positive-count-weighted multi-task aggregation.
//!
//! Ranking metrics are computed from integer confusion counts so the fast
//! sweep implementations and the brute-force enumeration oracles used in the
//! tests produce bit-identical values. ECE follows the confidence
//! convention: confidence is `max(p, 1-p)`, the confidence range `[0.5, 1]`
//! is split into ten equal-width, right-inclusive buckets, and empty buckets
//! contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and binary labels for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub task: usize,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, task: usize) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "scores ({}) and labels ({}) lengths differ",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        Ok(ScoredSet {
            scores,
            labels,
            task,
        })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Area under the precision-recall curve, non-interpolated: precision times
/// the recall increment, summed over descending unique score thresholds.
/// `None` when the set has no positives.
pub fn au_pr(s: &ScoredSet) -> Option<f64> {
    let p = s.positives();
    if p == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap());
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = s.scores[order[i]];
        // consume the whole tie group at this threshold
        while i < order.len() && s.scores[order[i]] == threshold {
            if s.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(area)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// positive-negative pairs ranked correctly, ties counting one half. `None`
/// for single-class input.
pub fn au_roc(s: &ScoredSet) -> Option<f64> {
    let p = s.positives() as u64;
    let n = s.negatives() as u64;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap());
    // ascending sweep; twice the U statistic stays integer through ties
    let mut u2: u64 = 0;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let threshold = s.scores[order[i]];
        let mut pos_here = 0u64;
        let mut neg_here = 0u64;
        while i < order.len() && s.scores[order[i]] == threshold {
            if s.labels[order[i]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            i += 1;
        }
        u2 += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
    }
    Some(u2 as f64 / (2 * p * n) as f64)
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        // undefined F1 treated as 0
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted average of the positive-class and negative-class F1 at the
/// given probability threshold (predictions at the threshold count positive).
pub fn macro_f1(s: &ScoredSet, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (score, &label) in s.scores.iter().zip(&s.labels) {
        let pred = *score >= threshold;
        match (pred, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    // negative class scored as if it were the positive one
    let f1_pos = f1_from_counts(tp, fp, fn_);
    let f1_neg = f1_from_counts(tn, fn_, fp);
    0.5 * (f1_pos + f1_neg)
}

/// Right-inclusive bucket index over confidence in `[0.5, 1]`, ten buckets.
/// A small tolerance keeps values that sit on a boundary (which is not
/// exactly representable) in the lower bucket.
pub fn ece_bucket(confidence: f64) -> usize {
    let raw = ((confidence - 0.5) * 20.0 - 1e-9).ceil() as i64 - 1;
    raw.clamp(0, 9) as usize
}

/// Expected calibration error with ten confidence buckets.
pub fn ece(s: &ScoredSet, buckets: usize) -> f64 {
    assert_eq!(buckets, 10, "the evaluation protocol uses ten buckets");
    let n = s.scores.len();
    if n == 0 {
        return 0.0;
    }
    let mut count = [0u64; 10];
    let mut conf_sum = [0.0f64; 10];
    let mut acc_sum = [0u64; 10];
    for (p, &label) in s.scores.iter().zip(&s.labels) {
        let pred = *p >= 0.5;
        let conf = if pred { *p } else { 1.0 - *p };
        let b = ece_bucket(conf);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            acc_sum[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..10 {
        if count[b] == 0 {
            continue;
        }
        let conf = conf_sum[b] / count[b] as f64;
        let acc = acc_sum[b] as f64 / count[b] as f64;
        total += count[b] as f64 / n as f64 * (acc - conf).abs();
    }
    total
}

/// Metrics of one task; AU metrics are `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub au_pr: Option<f64>,
    pub au_roc: Option<f64>,
    pub f1: f64,
    pub ece: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Per-task metrics plus positive-count-weighted aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<TaskMetrics>,
    pub weighted_au_pr: Option<f64>,
    pub weighted_au_roc: Option<f64>,
    pub weighted_f1: f64,
    pub weighted_ece: f64,
}

pub fn task_metrics(s: &ScoredSet) -> TaskMetrics {
    TaskMetrics {
        task: s.task,
        au_pr: au_pr(s),
        au_roc: au_roc(s),
        f1: macro_f1(s, 0.5),
        ece: ece(s, 10),
        positives: s.positives(),
        negatives: s.negatives(),
    }
}

/// Weighted aggregate of per-task values, weights proportional to positive
/// counts. Tasks whose metric is undefined are skipped (their weight is
/// renormalized away); `None` when nothing is defined.
pub fn weighted_aggregate(
    values: &[Option<f64>],
    positive_counts: &[usize],
) -> Result<Option<f64>> {
    if values.len() != positive_counts.len() {
        return Err(Error::Shape("values vs counts length mismatch".into()));
    }
    if positive_counts.iter().all(|&c| c == 0) {
        return Err(Error::Config(
            "weighted aggregation needs at least one positive task".into(),
        ));
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (v, &c) in values.iter().zip(positive_counts) {
        if let Some(v) = v {
            acc += *v * c as f64;
            wsum += c as f64;
        }
    }
    if wsum == 0.0 {
        return Ok(None);
    }
    Ok(Some(acc / wsum))
}

/// Evaluate every task and assemble the weighted report.
pub fn eval_report(sets: &[ScoredSet]) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::Config("eval_report needs at least one task".into()));
    }
    let per_task: Vec<TaskMetrics> = sets.iter().map(task_metrics).collect();
    let counts: Vec<usize> = per_task.iter().map(|t| t.positives).collect();
    let au_prs: Vec<Option<f64>> = per_task.iter().map(|t| t.au_pr).collect();
    let au_rocs: Vec<Option<f64>> = per_task.iter().map(|t| t.au_roc).collect();
    let f1s: Vec<Option<f64>> = per_task.iter().map(|t| Some(t.f1)).collect();
    let eces: Vec<Option<f64>> = per_task.iter().map(|t| Some(t.ece)).collect();
    Ok(EvalReport {
        weighted_au_pr: weighted_aggregate(&au_prs, &counts)?,
        weighted_au_roc: weighted_aggregate(&au_rocs, &counts)?,
        weighted_f1: weighted_aggregate(&f1s, &counts)?.unwrap_or(0.0),
        weighted_ece: weighted_aggregate(&eces, &counts)?.unwrap_or(0.0),
        per_task,
    })
}

impl EvalReport {
    /// Flat key-value text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "missing".into(),
        };
        for t in &self.per_task {
            out.push_str(&format!(
                "task{}.au_pr = {}\ntask{}.au_roc = {}\ntask{}.f1 = {:.6}\ntask{}.ece = {:.6}\ntask{}.positives = {}\n",
                t.task,
                fmt(&t.au_pr),
                t.task,
                fmt(&t.au_roc),
                t.task,
                t.f1,
                t.task,
                t.ece,
                t.task,
                t.positives,
            ));
        }
        out.push_str(&format!("weighted.au_pr = {}\n", fmt(&self.weighted_au_pr)));
        out.push_str(&format!(
            "weighted.au_roc = {}\n",
            fmt(&self.weighted_au_roc)
        ));
        out.push_str(&format!("weighted.f1 = {:.6}\n", self.weighted_f1));
        out.push_str(&format!("weighted.ece = {:.6}\n", self.weighted_ece));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Brute-force oracles: independent enumeration paths used by tests and the
/// acceptance suite to validate the sweep implementations exactly.
pub mod brute {
    use super::ScoredSet;

    /// AU-PR by rescanning the whole set at every unique descending threshold.
    pub fn au_pr(s: &ScoredSet) -> Option<f64> {
        let p = s.positives();
        if p == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = s.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &th in &thresholds {
            let mut tp = 0u64;
            let mut fp = 0u64;
            for (score, &label) in s.scores.iter().zip(&s.labels) {
                if *score >= th {
                    if label {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / p as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            area += precision * (recall - prev_recall);
            prev_recall = recall;
        }
        Some(area)
    }

    /// AU-ROC by counting every positive-negative pair.
    pub fn au_roc(s: &ScoredSet) -> Option<f64> {
        let p = s.positives() as u64;
        let n = s.negatives() as u64;
        if p == 0 || n == 0 {
            return None;
        }
        let mut u2: u64 = 0;
        for (sp, &lp) in s.scores.iter().zip(&s.labels) {
            if !lp {
                continue;
            }
            for (sn, &ln) in s.scores.iter().zip(&s.labels) {
                if ln {
                    continue;
                }
                if sp > sn {
                    u2 += 2;
                } else if sp == sn {
                    u2 += 1;
                }
            }
        }
        Some(u2 as f64 / (2 * p * n) as f64)
    }

    /// Macro F1 from a freshly recounted confusion matrix.
    pub fn macro_f1(s: &ScoredSet, threshold: f64) -> f64 {
        let count = |pred_wanted: bool, label_wanted: bool| -> u64 {
            s.scores
                .iter()
                .zip(&s.labels)
                .filter(|(score, &label)| {
                    (**score >= threshold) == pred_wanted && label == label_wanted
                })
                .count() as u64
        };
        let f1 = |tp: u64, fp: u64, fn_: u64| -> f64 {
            if 2 * tp + fp + fn_ == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            }
        };
        let pos = f1(count(true, true), count(true, false), count(false, true));
        let neg = f1(count(false, false), count(false, true), count(true, false));
        0.5 * (pos + neg)
    }

    /// ECE by filtering each bucket independently.
    pub fn ece(s: &ScoredSet) -> f64 {
        let n = s.scores.len();
        if n == 0 {
            return 0.0;
        }
        let conf_pred: Vec<(f64, bool)> = s
            .scores
            .iter()
            .map(|&p| {
                if p >= 0.5 {
                    (p, true)
                } else {
                    (1.0 - p, false)
                }
            })
            .collect();
        let mut total = 0.0;
        for b in 0..10 {
            let members: Vec<usize> = (0..n)
                .filter(|&i| super::ece_bucket(conf_pred[i].0) == b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut conf = 0.0;
            let mut acc = 0u64;
            for &i in &members {
                conf += conf_pred[i].0;
                if conf_pred[i].1 == s.labels[i] {
                    acc += 1;
                }
            }
            let m = members.len() as f64;
            total += m / n as f64 * (acc as f64 / m - conf / m).abs();
        }
        total
    }
}
