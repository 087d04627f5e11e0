//! Predictive quality, calibration, diversity, OOD detection, cost and few-shot metrics.
//!
//! Batch statistics go through [`EvalAccumulator`], whose sums are kept in
//! fixed point so that merging shards in any order gives the same bits.

pub mod fewshot;
pub mod flops;
pub mod ood;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::losses::PROB_CLAMP;
use crate::model::PredictionBundle;
use crate::numerics::Tensor;

pub use fewshot::{default_ridge, fewshot_probe, FewshotMode};
pub use flops::{ensemble_flops, flops_estimate, forward_flops, forward_gflops, ForwardFlops};
pub use ood::{max_prob_scores, ood_metrics, FprCriterion, OodMetrics};

pub const ECE_BINS: usize = 15;

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return dim_err(format!("{} predictions for {} labels", probs.rows(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return dim_err(format!("label {y} out of range for {} classes", probs.cols()));
    }
    Ok(())
}

/// Mean negative log-likelihood and top-1 error in percent.
pub fn nll_error(probs: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut nll = 0.0;
    let mut wrong = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        nll -= row[y].max(PROB_CLAMP).ln();
        if argmax(row) != y {
            wrong += 1;
        }
    }
    Ok((nll / n, 100.0 * wrong as f64 / n))
}

fn bin_of(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    let mut acc = EvalAccumulator::with_bins(0, bins);
    acc.add_calibration(probs, labels)?;
    Ok(acc.ece())
}

/// `KL(p ‖ q)` with both sides clamped.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| {
        let a = a.max(PROB_CLAMP);
        a * (a.ln() - b.max(PROB_CLAMP).ln())
    }).sum()
}

fn cosine(p: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let np: f64 = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq: f64 = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        0.0
    } else {
        dot / (np * nq)
    }
}

/// Mean KL over ordered member pairs and inputs; `None` for a single member.
pub fn kl_diversity(member_probs: &Tensor) -> Result<Option<f64>> {
    let mut acc = EvalAccumulator::new(0);
    acc.add_diversity(member_probs, None)?;
    Ok(acc.kl_diversity())
}

/// Mean pairwise cosine similarity and disagreement normalized by the mean member error.
///
/// Disagreement is `None` when members never err, since the ratio is undefined.
pub fn pair_diversity(member_probs: &Tensor, labels: &[usize]) -> Result<Option<(f64, Option<f64>)>> {
    let mut acc = EvalAccumulator::new(0);
    acc.add_diversity(member_probs, Some(labels))?;
    Ok(acc.cosine_similarity().map(|c| (c, acc.normalized_disagreement())))
}

/// Fixed-point sum with 60 fractional bits; addition is exact and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExactSum(i128);

const FIXED_SCALE: f64 = (1u64 << 60) as f64;

impl ExactSum {
    pub fn add(&mut self, v: f64) {
        debug_assert!(v.is_finite());
        self.0 += (v * FIXED_SCALE).round() as i128;
    }

    pub fn merge(&mut self, other: ExactSum) {
        self.0 += other.0;
    }

    pub fn value(&self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Bin {
    count: u64,
    correct: u64,
    conf: ExactSum,
}

/// Mergeable evaluation statistics over batches of [`PredictionBundle`]s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalAccumulator {
    members: usize,
    count: u64,
    nll: ExactSum,
    wrong: u64,
    member_nll: ExactSum,
    member_wrong: u64,
    bins: Vec<Bin>,
    calib_count: u64,
    kl: ExactSum,
    cos: ExactSum,
    disagree: u64,
    pair_terms: u64,
    div_member_wrong: u64,
    div_member_terms: u64,
}

impl EvalAccumulator {
    pub fn new(members: usize) -> Self {
        Self::with_bins(members, ECE_BINS)
    }

    pub fn with_bins(members: usize, bins: usize) -> Self {
        Self {
            members,
            count: 0,
            nll: ExactSum::default(),
            wrong: 0,
            member_nll: ExactSum::default(),
            member_wrong: 0,
            bins: vec![Bin::default(); bins.max(1)],
            calib_count: 0,
            kl: ExactSum::default(),
            cos: ExactSum::default(),
            disagree: 0,
            pair_terms: 0,
            div_member_wrong: 0,
            div_member_terms: 0,
        }
    }

    /// Adds one evaluated batch.
    pub fn update(&mut self, bundle: &PredictionBundle, labels: &[usize]) -> Result<()> {
        let probs = &bundle.ensemble_probs;
        check_labels(probs, labels)?;
        if self.members == 0 {
            self.members = bundle.members();
        } else if self.members != bundle.members() {
            return dim_err(format!("accumulator holds {} members, batch has {}", self.members, bundle.members()));
        }
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row(i);
            self.nll.add(-row[y].max(PROB_CLAMP).ln());
            if argmax(row) != y {
                self.wrong += 1;
            }
        }
        for m in 0..bundle.members() {
            let p = bundle.member(m);
            for (i, &y) in labels.iter().enumerate() {
                self.member_nll.add(-p.row(i)[y].max(PROB_CLAMP).ln());
                if argmax(p.row(i)) != y {
                    self.member_wrong += 1;
                }
            }
        }
        self.count += labels.len() as u64;
        self.add_calibration(probs, labels)?;
        if bundle.members() > 1 {
            self.add_diversity(&bundle.member_probs, Some(labels))?;
        }
        Ok(())
    }

    fn add_calibration(&mut self, probs: &Tensor, labels: &[usize]) -> Result<()> {
        check_labels(probs, labels)?;
        let nb = self.bins.len();
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row(i);
            let pred = argmax(row);
            let bin = &mut self.bins[bin_of(row[pred], nb)];
            bin.count += 1;
            bin.conf.add(row[pred]);
            if pred == y {
                bin.correct += 1;
            }
        }
        self.calib_count += labels.len() as u64;
        Ok(())
    }

    fn add_diversity(&mut self, member_probs: &Tensor, labels: Option<&[usize]>) -> Result<()> {
        if member_probs.shape().len() != 3 {
            return dim_err(format!("member probabilities must be [M×B×C], got {:?}", member_probs.shape()));
        }
        let (m, b, c) = (member_probs.shape()[0], member_probs.shape()[1], member_probs.shape()[2]);
        if let Some(l) = labels {
            if l.len() != b {
                return dim_err(format!("{b} predictions for {} labels", l.len()));
            }
        }
        if m < 2 {
            return Ok(());
        }
        let d = member_probs.data();
        let row = |k: usize, i: usize| &d[(k * b + i) * c..(k * b + i + 1) * c];
        for i in 0..b {
            let arg: Vec<usize> = (0..m).map(|k| argmax(row(k, i))).collect();
            for a in 0..m {
                for z in 0..m {
                    if a == z {
                        continue;
                    }
                    self.kl.add(kl(row(a, i), row(z, i)));
                    self.cos.add(cosine(row(a, i), row(z, i)));
                    if arg[a] != arg[z] {
                        self.disagree += 1;
                    }
                    self.pair_terms += 1;
                }
            }
            if let Some(l) = labels {
                self.div_member_wrong += arg.iter().filter(|&&p| p != l[i]).count() as u64;
                self.div_member_terms += m as u64;
            }
        }
        Ok(())
    }

    /// Combines statistics from a disjoint shard.
    pub fn merge(&mut self, other: &EvalAccumulator) -> Result<()> {
        if self.bins.len() != other.bins.len() {
            return dim_err("cannot merge accumulators with different bin counts");
        }
        if self.members == 0 {
            self.members = other.members;
        } else if other.members != 0 && other.members != self.members {
            return dim_err("cannot merge accumulators over different member counts");
        }
        self.count += other.count;
        self.nll.merge(other.nll);
        self.wrong += other.wrong;
        self.member_nll.merge(other.member_nll);
        self.member_wrong += other.member_wrong;
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.correct += b.correct;
            a.conf.merge(b.conf);
        }
        self.calib_count += other.calib_count;
        self.kl.merge(other.kl);
        self.cos.merge(other.cos);
        self.disagree += other.disagree;
        self.pair_terms += other.pair_terms;
        self.div_member_wrong += other.div_member_wrong;
        self.div_member_terms += other.div_member_terms;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn nll(&self) -> f64 {
        self.nll.value() / self.count as f64
    }

    pub fn error_pct(&self) -> f64 {
        100.0 * self.wrong as f64 / self.count as f64
    }

    /// Mean over members of each member's own NLL.
    pub fn mean_member_nll(&self) -> f64 {
        self.member_nll.value() / (self.count * self.members as u64) as f64
    }

    pub fn mean_member_error_pct(&self) -> f64 {
        100.0 * self.member_wrong as f64 / (self.count * self.members as u64) as f64
    }

    pub fn ece(&self) -> f64 {
        if self.calib_count == 0 {
            return 0.0;
        }
        let n = self.calib_count as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| {
                let k = b.count as f64;
                (k / n) * (b.correct as f64 / k - b.conf.value() / k).abs()
            })
            .sum()
    }

    pub fn kl_diversity(&self) -> Option<f64> {
        (self.pair_terms > 0).then(|| self.kl.value() / self.pair_terms as f64)
    }

    pub fn cosine_similarity(&self) -> Option<f64> {
        (self.pair_terms > 0).then(|| self.cos.value() / self.pair_terms as f64)
    }

    pub fn normalized_disagreement(&self) -> Option<f64> {
        if self.pair_terms == 0 || self.div_member_wrong == 0 {
            return None;
        }
        let dis = self.disagree as f64 / self.pair_terms as f64;
        let err = self.div_member_wrong as f64 / self.div_member_terms as f64;
        Some(dis / err)
    }

    /// Report with the batch statistics filled in and no OOD, few-shot or cost entries.
    pub fn report(&self) -> Result<EvalReport> {
        if self.count == 0 {
            return Err(crate::Error::Evaluation("no examples were evaluated".into()));
        }
        let r = EvalReport {
            nll: self.nll(),
            error_pct: self.error_pct(),
            ece: self.ece(),
            kl_diversity: self.kl_diversity(),
            cosine_similarity: self.cosine_similarity(),
            normalized_disagreement: self.normalized_disagreement(),
            flops_train_giga: 0.0,
            ood: BTreeMap::new(),
            fewshot: BTreeMap::new(),
        };
        if !r.nll.is_finite() {
            return Err(crate::Error::Evaluation("non-finite NLL".into()));
        }
        Ok(r)
    }
}

/// Metrics bundle for one evaluated model. Single-member models report `null` diversity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub nll: f64,
    pub error_pct: f64,
    pub ece: f64,
    pub kl_diversity: Option<f64>,
    pub cosine_similarity: Option<f64>,
    pub normalized_disagreement: Option<f64>,
    pub flops_train_giga: f64,
    /// Keyed `"<in>_vs_<out>"`.
    pub ood: BTreeMap<String, OodMetrics>,
    /// Keyed by shot count.
    pub fewshot: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn nll_hand_examples() {
        let (nll, err) = nll_error(&t(&[vec![0.5, 0.5], vec![0.5, 0.5]]), &[0, 1]).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-12);
        assert_eq!(err, 50.0);
        let (nll, err) = nll_error(&t(&[vec![0.9, 0.1], vec![0.9, 0.1]]), &[0, 1]).unwrap();
        assert!((nll - 1.2040).abs() < 1e-4);
        assert_eq!(err, 50.0);
    }

    #[test]
    fn ece_hand_examples() {
        let p = t(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((ece(&p, &[0, 1], 15).unwrap() - 0.5).abs() < 1e-12);
        let q = t(&[vec![0.7, 0.3]]);
        assert!((ece(&q, &[0], 15).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_example() {
        let mp = Tensor::new(vec![2, 1, 2], vec![0.75, 0.25, 0.25, 0.75]).unwrap();
        let v = kl_diversity(&mp).unwrap().unwrap();
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(kl_diversity(&Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap()).unwrap(), None);
    }

    #[test]
    fn disagreement_hand_example() {
        // both members wrong on the last input, each in a different way
        let a = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]];
        let b = [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.8, 0.1, 0.1], [0.1, 0.1, 0.8]];
        let data: Vec<f64> = a.iter().chain(b.iter()).flatten().cloned().collect();
        let mp = Tensor::new(vec![2, 4, 3], data).unwrap();
        let (cos, nd) = pair_diversity(&mp, &[0, 1, 0, 0]).unwrap().unwrap();
        assert!(cos < 1.0);
        assert!((nd.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_members_have_no_diversity() {
        let mp = Tensor::new(vec![2, 2, 2], vec![0.6, 0.4, 0.3, 0.7, 0.6, 0.4, 0.3, 0.7]).unwrap();
        let (cos, nd) = pair_diversity(&mp, &[1, 1]).unwrap().unwrap();
        assert!((cos - 1.0).abs() < 1e-12);
        assert_eq!(nd, Some(0.0));
        assert_eq!(kl_diversity(&mp).unwrap(), Some(0.0));
    }

    #[test]
    fn exact_sum_is_order_free() {
        let xs = [1e-3, 2.5, -0.7, 1e-9, 3.3];
        let mut a = ExactSum::default();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = ExactSum::default();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert_eq!(a, b);
    }
}
