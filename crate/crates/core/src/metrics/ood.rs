//! Out-of-distribution detection with OOD examples as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodMetrics {
    pub fpr95: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

/// Which operating point `fpr95` reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FprCriterion {
    /// FPR once the true positive rate first reaches 95%.
    #[default]
    Tpr95,
    /// FPR at the lowest threshold whose precision is still at least 95%.
    Precision95,
}

/// `1 − max_c p(c)` per row.
pub fn max_prob_scores(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows()).map(|i| 1.0 - probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Rank-statistic AUROC, ties counted as one half.
pub fn auc_roc(in_scores: &[f64], out_scores: &[f64]) -> f64 {
    let (np, nn) = (out_scores.len() as f64, in_scores.len() as f64);
    let mut all: Vec<(f64, bool)> = out_scores.iter().map(|&s| (s, true)).chain(in_scores.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Confusion counts `(tp, fp)` at each distinct threshold, scanning from high to low.
fn sweep(in_scores: &[f64], out_scores: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = out_scores.iter().map(|&s| (s, true)).chain(in_scores.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Trapezoidal area under precision-recall, starting from `(recall 0, precision 1)`.
pub fn auc_pr(in_scores: &[f64], out_scores: &[f64]) -> f64 {
    let p = out_scores.len() as f64;
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    for (tp, fp) in sweep(in_scores, out_scores) {
        let r = tp / p;
        let prec = tp / (tp + fp);
        area += (r - prev_r) * (prec + prev_p) / 2.0;
        prev_r = r;
        prev_p = prec;
    }
    area
}

pub fn fpr_at(in_scores: &[f64], out_scores: &[f64], criterion: FprCriterion) -> f64 {
    let (p, n) = (out_scores.len() as f64, in_scores.len() as f64);
    let pts = sweep(in_scores, out_scores);
    match criterion {
        FprCriterion::Tpr95 => pts.iter().find(|(tp, _)| tp / p >= 0.95).map_or(1.0, |(_, fp)| fp / n),
        FprCriterion::Precision95 => {
            let mut best = 0.0;
            for (tp, fp) in pts {
                if tp / (tp + fp) >= 0.95 {
                    best = fp / n;
                }
            }
            best
        }
    }
}

pub fn ood_metrics(in_scores: &[f64], out_scores: &[f64], criterion: FprCriterion) -> Result<OodMetrics> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return dim_err("OOD metrics need both in- and out-of-distribution scores");
    }
    if in_scores.iter().chain(out_scores).any(|s| !s.is_finite()) {
        return Err(crate::Error::Evaluation("non-finite OOD score".into()));
    }
    Ok(OodMetrics {
        fpr95: fpr_at(in_scores, out_scores, criterion),
        auc_roc: auc_roc(in_scores, out_scores),
        auc_pr: auc_pr(in_scores, out_scores),
    })
}
