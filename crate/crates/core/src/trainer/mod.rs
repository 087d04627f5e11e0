//! Deterministic fine-tuning loop and batched evaluation.

pub mod data;
pub mod eval;
pub mod sgd;

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::{data_loss_graph, total_loss_graph, LossConfig};
use crate::model::{stack_channels, ForwardOptions, Model, Variant};
use crate::numerics::{Graph, Rng};
use crate::par::ExecPolicy;

pub use data::{load_dataset, make_synthetic_dataset, Dataset, DatasetKind, DatasetSpec, Split};
pub use eval::{evaluate, evaluate_report, EvalConfig, EvalOutput, Predictor};
pub use sgd::{learning_rate, sgd_step, LrSchedule, SgdState, StepInfo};

fn d_momentum() -> f64 {
    0.9
}
fn d_clip() -> f64 {
    10.0
}
fn d_warmup() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Validation every this many steps; 0 only at the end.
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            clip_norm: 10.0,
            lr_schedule: LrSchedule::Constant,
            warmup_fraction: 0.1,
            seed,
            loss: LossConfig::default(),
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return config_err("steps and batch_size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return config_err("clip_norm must be positive");
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return config_err("base_lr must be positive and momentum in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return config_err("warmup_fraction must lie in [0, 1)");
        }
        if !(self.loss.aux_weight >= 0.0) {
            return config_err("aux_weight must be nonnegative");
        }
        Ok(())
    }
}

/// One logged step; evaluation columns are filled on evaluation steps only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub aux: Option<f64>,
    pub nll: Option<f64>,
    pub error: Option<f64>,
    pub ece: Option<f64>,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Post-clipping global gradient norm per step.
    pub clipped_norms: Vec<f64>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// A training batch: network inputs plus one label vector per member.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: crate::numerics::Tensor,
    pub labels: Vec<Vec<usize>>,
}

/// Draws `batch_size` distinct training examples. MIMO models get `M` input
/// slots, where slot `m > 0` repeats slot 0 with the input repetition probability
/// and is drawn independently otherwise; the result is repeated over batch
/// repetitions with fresh slot draws.
pub fn sample_batch(model: &Model, train: &Split, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    let spec = &model.spec;
    let n = train.len();
    let bs = batch_size.min(n);
    if spec.variant != Variant::Mimo {
        let idx: Vec<usize> = rng.permutation(n).into_iter().take(bs).collect();
        let split = train.select(&idx);
        let members = spec.output_members();
        return Ok(Batch { images: split.images, labels: vec![split.labels; members] });
    }
    let m = spec.m;
    let mut slot_idx: Vec<Vec<usize>> = vec![Vec::new(); m];
    for _ in 0..spec.batch_repetitions {
        let base: Vec<usize> = rng.permutation(n).into_iter().take(bs).collect();
        slot_idx[0].extend(&base);
        for slot in slot_idx.iter_mut().skip(1) {
            let u = rng.uniform(&[bs]);
            for (i, &b) in base.iter().enumerate() {
                slot.push(if u.data()[i] < spec.mimo_input_repetition_prob { b } else { rng.index(n) });
            }
        }
    }
    let splits: Vec<Split> = slot_idx.iter().map(|idx| train.select(idx)).collect();
    let images = stack_channels(&splits.iter().map(|s| &s.images).collect::<Vec<_>>())?;
    Ok(Batch { images, labels: splits.into_iter().map(|s| s.labels).collect() })
}

fn check_compat(model: &Model, data: &Dataset) -> Result<()> {
    let s = data.train.images.shape();
    if model.spec.classes != data.classes {
        return config_err(format!("model has {} classes, dataset {}", model.spec.classes, data.classes));
    }
    if s[1] != model.spec.image_size || s[3] != model.spec.channels {
        return config_err(format!("images {:?} do not fit a {}px {}-channel model", s, model.spec.image_size, model.spec.channels));
    }
    Ok(())
}

/// Step `s` draws its batch from `Rng::new(seed).fork(s).fork(0)` and its
/// routing noise and dropout from `.fork(1)`, so runs are reproducible bit for bit.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, eval_cfg: &EvalConfig) -> Result<History> {
    cfg.validate()?;
    model.spec.validate()?;
    check_compat(model, data)?;
    let root = Rng::new(cfg.seed);
    let mut state = SgdState::default();
    let mut history = History::default();
    for step in 0..cfg.steps {
        let srng = root.fork(step as u64);
        let batch = sample_batch(model, &data.train, cfg.batch_size, &mut srng.fork(0))?;
        let mut g = Graph::new();
        let pv = model.params.to_graph(&mut g, true);
        let out = model.graph_forward(&mut g, &pv, &batch.images, &srng.fork(1), ForwardOptions::train())?;
        let data_loss = data_loss_graph(&mut g, &out.member_logits, &batch.labels, cfg.loss.loss_mode)?;
        let (total, aux) = total_loss_graph(&mut g, data_loss, &out.sparse, cfg.loss.aux_weight)?;
        let loss = g.value(total).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence { step, reason: format!("loss is {loss}") });
        }
        let aux_value = aux.map(|a| g.value(a).data()[0]);
        let mut grads = g.backward(total)?;
        let mut named = IndexMap::new();
        for (name, &v) in pv.iter() {
            if let Some(t) = grads.take(v) {
                named.insert(name.clone(), t);
            }
        }
        if named.values().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { step, reason: "non-finite gradient".into() });
        }
        let lr = learning_rate(cfg.lr_schedule, cfg.base_lr, step, cfg.steps, cfg.warmup_fraction);
        let info = sgd_step(&mut model.params, &named, &mut state, lr, cfg.momentum, cfg.clip_norm)?;
        history.clipped_norms.push(info.clipped_norm);

        let mut row = HistoryRow { step, loss, aux: aux_value, nll: None, error: None, ece: None, kl: None };
        let last = step + 1 == cfg.steps;
        if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            let ev = evaluate(&Predictor::Model(model), &data.val, eval_cfg, &root.fork(u64::MAX), ExecPolicy::Sequential)?;
            let r = ev.acc.report()?;
            row.nll = Some(r.nll);
            row.error = Some(r.error_pct);
            row.ece = Some(r.ece);
            row.kl = r.kl_diversity;
        }
        history.rows.push(row);
    }
    Ok(history)
}
