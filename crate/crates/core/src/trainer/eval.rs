//! Batched evaluation of single models, deep ensembles and MC dropout.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::metrics::{fewshot_probe, max_prob_scores, ood_metrics, EvalAccumulator, EvalReport, FewshotMode, FprCriterion};
use crate::model::{deep_ensemble_predict, mc_dropout_predict, Model, PredictionBundle};
use crate::numerics::{Rng, Tensor};
use crate::par::{try_map, ExecPolicy};
use crate::routing::Phase;

use super::data::{Dataset, Split};

fn d_batch() -> usize {
    256
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Score the test split against the OOD split when the dataset has one.
    #[serde(default = "d_true")]
    pub ood: bool,
    #[serde(default)]
    pub fpr_criterion: FprCriterion,
    /// Shots per class for the linear probe on the unseen-prototype split.
    #[serde(default)]
    pub fewshot_shots: Vec<usize>,
    #[serde(default)]
    pub fewshot_mode: FewshotMode,
    #[serde(default)]
    pub fewshot_ridge: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            ood: true,
            fpr_criterion: FprCriterion::default(),
            fewshot_shots: Vec::new(),
            fewshot_mode: FewshotMode::default(),
            fewshot_ridge: None,
        }
    }
}

/// Anything that turns images into member predictions.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    DeepEnsemble(&'a [Model]),
    McDropout { model: &'a Model, samples: usize },
}

impl Predictor<'_> {
    pub fn predict(&self, images: &Tensor, rng: &Rng) -> Result<PredictionBundle> {
        match *self {
            Predictor::Model(m) => m.forward(images, rng, Phase::Eval),
            Predictor::DeepEnsemble(ms) => deep_ensemble_predict(ms, images, rng),
            Predictor::McDropout { model, samples } => mc_dropout_predict(model, images, samples, rng),
        }
    }

    /// `[M×B×D]` representations; deep-ensemble members contribute their first member each.
    pub fn features(&self, images: &Tensor, rng: &Rng) -> Result<Tensor> {
        match *self {
            Predictor::Model(m) | Predictor::McDropout { model: m, .. } => m.features(images, rng),
            Predictor::DeepEnsemble(ms) => {
                if ms.is_empty() {
                    return config_err("deep ensemble without members");
                }
                let parts = ms.iter().map(|m| m.features(images, rng)).collect::<Result<Vec<_>>>()?;
                let (b, d) = (parts[0].shape()[1], parts[0].shape()[2]);
                let data = parts.iter().flat_map(|t| t.data()[..b * d].iter().cloned()).collect();
                Tensor::new(vec![parts.len(), b, d], data)
            }
        }
    }
}

/// Accumulated statistics plus the per-example OOD scores in split order.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub acc: EvalAccumulator,
    pub scores: Vec<f64>,
}

/// Evaluates `split` in shards of `cfg.batch_size`; shard `i` uses `rng.fork(i)`.
pub fn evaluate(pred: &Predictor, split: &Split, cfg: &EvalConfig, rng: &Rng, policy: ExecPolicy) -> Result<EvalOutput> {
    let shards = split.batches(cfg.batch_size);
    let idx: Vec<usize> = (0..shards.len()).collect();
    let parts = try_map(policy, &idx, |&i| {
        let bundle = pred.predict(&shards[i].images, &rng.fork(i as u64))?;
        let mut acc = EvalAccumulator::new(bundle.members());
        acc.update(&bundle, &shards[i].labels)?;
        Ok((acc, max_prob_scores(&bundle.ensemble_probs)))
    })?;
    let mut acc = EvalAccumulator::new(0);
    let mut scores = Vec::with_capacity(split.len());
    for (a, s) in parts {
        acc.merge(&a)?;
        scores.extend(s);
    }
    Ok(EvalOutput { acc, scores })
}

fn features_of(pred: &Predictor, split: &Split, cfg: &EvalConfig, rng: &Rng, policy: ExecPolicy) -> Result<Tensor> {
    let shards = split.batches(cfg.batch_size);
    let idx: Vec<usize> = (0..shards.len()).collect();
    let parts = try_map(policy, &idx, |&i| pred.features(&shards[i].images, &rng.fork(i as u64)))?;
    let (m, d) = (parts[0].shape()[0], parts[0].shape()[2]);
    let n = split.len();
    let mut data = vec![0.0; m * n * d];
    let mut offset = 0;
    for p in &parts {
        let b = p.shape()[1];
        for k in 0..m {
            let src = &p.data()[k * b * d..(k + 1) * b * d];
            data[(k * n + offset) * d..(k * n + offset + b) * d].copy_from_slice(src);
        }
        offset += b;
    }
    Tensor::new(vec![m, n, d], data)
}

/// Full report on the test split, with OOD and few-shot entries when available.
pub fn evaluate_report(pred: &Predictor, data: &Dataset, cfg: &EvalConfig, rng: &Rng, policy: ExecPolicy) -> Result<EvalReport> {
    let test = evaluate(pred, &data.test, cfg, &rng.fork(0), policy)?;
    let mut report = test.acc.report()?;
    if let (true, Some(ood)) = (cfg.ood, &data.ood) {
        let out = evaluate(pred, ood, cfg, &rng.fork(1), policy)?;
        report.ood.insert("test_vs_ood".into(), ood_metrics(&test.scores, &out.scores, cfg.fpr_criterion)?);
    }
    if !cfg.fewshot_shots.is_empty() {
        let Some(ood) = &data.ood else {
            return config_err("few-shot evaluation needs a split with unseen prototypes");
        };
        let feats = features_of(pred, ood, cfg, &rng.fork(2), policy)?;
        for &shots in &cfg.fewshot_shots {
            let err = fewshot_probe(&feats, &ood.labels, data.classes, shots, cfg.fewshot_mode, cfg.fewshot_ridge)?;
            report.fewshot.insert(shots.to_string(), err);
        }
    }
    Ok(report)
}
