//! Config-driven experiments: seeded repetitions with an optional upstream
//! stage, per-seed artifacts, summaries and grid sweeps.
//!
//! Repetition `r` works from `base = train.seed + r`. All randomness below is
//! addressed through forks of `Rng::new(base)`, so seeds can run concurrently
//! without changing any output byte.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyzer::CostPoint;
use crate::checkpoint::{adapt_checkpoint_be, adapt_checkpoint_mimo, adapt_vmoe_checkpoint, Checkpoint};
use crate::error::{config_err, Error, Result};
use crate::metrics::{flops_estimate, forward_gflops, EvalReport};
use crate::model::{build_model, Model, ModelSpec, Variant};
use crate::numerics::Rng;
use crate::par::{try_map, ExecPolicy};
use crate::trainer::{evaluate, evaluate_report, load_dataset, train, Dataset, DatasetSpec, EvalConfig, History, Predictor, TrainConfig};

/// How the trained networks are turned into a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The model's own members.
    #[default]
    Standard,
    /// `members` independently fine-tuned copies of the model.
    DeepEnsemble,
    /// `members` dropout samples of one model.
    McDropout,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::DeepEnsemble => "deep_ensemble",
            Method::McDropout => "mc_dropout",
        }
    }
}

/// Pre-training on a larger split drawn from the same task, followed by
/// checkpoint adaptation to the target variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    pub train_size: usize,
    pub steps: usize,
    /// Defaults to the downstream learning rate.
    #[serde(default)]
    pub base_lr: Option<f64>,
}

fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub method: Method,
    /// Ensemble members or dropout samples; ignored by `standard`.
    #[serde(default = "d_one")]
    pub members: usize,
    #[serde(default)]
    pub upstream: Option<UpstreamConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.repetitions == 0 {
            return config_err("repetitions must be at least 1");
        }
        if self.members == 0 {
            return config_err("members must be at least 1");
        }
        if self.model.classes != self.data.classes {
            return config_err(format!("model.classes {} differs from data.classes {}", self.model.classes, self.data.classes));
        }
        if self.model.image_size != self.data.image_size || self.model.channels != self.data.channels {
            return config_err("model and data disagree on image_size or channels");
        }
        if let Some(up) = &self.upstream {
            if up.train_size == 0 || up.steps == 0 {
                return config_err("upstream.train_size and upstream.steps must be positive");
            }
            if up.base_lr.is_some_and(|lr| !(lr > 0.0)) {
                return config_err("upstream.base_lr must be positive");
            }
            upstream_spec(&self.model)?.validate()?;
        }
        Ok(())
    }

    /// Members of the final predictor.
    pub fn predictor_members(&self) -> usize {
        match self.method {
            Method::Standard => self.model.output_members(),
            Method::DeepEnsemble | Method::McDropout => self.members,
        }
    }

    fn trained_models(&self) -> usize {
        if self.method == Method::DeepEnsemble {
            self.members
        } else {
            1
        }
    }

    /// Downstream training GFLOPs of one repetition.
    pub fn train_gflops(&self) -> Result<f64> {
        let reps = if self.model.variant == Variant::Mimo { self.model.batch_repetitions } else { 1 };
        let batch = (self.train.batch_size * reps) as u64;
        let one = flops_estimate(&self.model, self.train.steps as u64, batch, true)?;
        Ok(one * self.trained_models() as f64)
    }

    /// Forward GFLOPs of the whole predictor on one example.
    pub fn inference_gflops(&self) -> Result<f64> {
        let one = forward_gflops(&self.model, true)?;
        Ok(match self.method {
            Method::Standard => one,
            Method::DeepEnsemble | Method::McDropout => one * self.members as f64,
        })
    }
}

/// Architecture an upstream checkpoint for `target` is trained as.
pub fn upstream_spec(target: &ModelSpec) -> Result<ModelSpec> {
    let mut s = target.clone();
    s.variant = match target.variant {
        Variant::Vit | Variant::Be => Variant::Vit,
        Variant::Vmoe | Variant::Pbe | Variant::OnlyTiling | Variant::OnlyPartitioning | Variant::Multihead => Variant::Vmoe,
        Variant::Mimo => target.mimo_base,
    };
    s.m = 1;
    Ok(s)
}

/// Turns an upstream checkpoint into a model with spec `target`.
pub fn adapt_upstream(ckpt: &Checkpoint, target: &ModelSpec, rng: &mut Rng) -> Result<Model> {
    let adapted = match target.variant {
        Variant::Vit | Variant::Vmoe | Variant::Multihead => ckpt.clone(),
        Variant::Pbe | Variant::OnlyTiling | Variant::OnlyPartitioning => adapt_vmoe_checkpoint(ckpt, target.variant, target.m)?,
        Variant::Be => adapt_checkpoint_be(ckpt, target.m, target.be_init, rng)?,
        Variant::Mimo => adapt_checkpoint_mimo(ckpt, target.m)?,
    };
    Ok(Checkpoint::new(target.clone(), adapted.params)?.into_model())
}

fn derived_seed(base: u64, tag: u64) -> u64 {
    Rng::new(base).fork(tag).seed()
}

const TAG_UP_INIT: u64 = 1;
const TAG_UP_TRAIN: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_MEMBER_INIT: u64 = 10;
const TAG_MEMBER_TRAIN: u64 = 1000;

fn base_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.train.seed.wrapping_add(rep as u64)
}

fn upstream_key(cfg: &ExperimentConfig, rep: usize) -> Result<Option<String>> {
    let Some(up) = &cfg.upstream else {
        return Ok(None);
    };
    let key = serde_json::json!({
        "spec": upstream_spec(&cfg.model)?,
        "train": cfg.train,
        "data": cfg.data,
        "upstream": up,
        "seed": base_seed(cfg, rep),
    });
    Ok(Some(key.to_string()))
}

/// Trains the upstream model of repetition `rep`, if the config has one.
pub fn train_upstream(cfg: &ExperimentConfig, rep: usize) -> Result<Option<Model>> {
    let Some(up) = &cfg.upstream else {
        return Ok(None);
    };
    let base = base_seed(cfg, rep);
    let mut ds = cfg.data.clone();
    ds.train_size = up.train_size;
    let data = load_dataset(&ds)?;
    let mut model = build_model(&upstream_spec(&cfg.model)?, &mut Rng::new(base).fork(TAG_UP_INIT))?;
    let mut tc = cfg.train.clone();
    tc.steps = up.steps;
    tc.base_lr = up.base_lr.unwrap_or(cfg.train.base_lr);
    tc.seed = derived_seed(base, TAG_UP_TRAIN);
    tc.eval_every = 0;
    train(&mut model, &data, &tc, &cfg.eval)?;
    Ok(Some(model))
}

/// Everything one repetition produced.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub rep: usize,
    pub report: EvalReport,
    pub shift: Option<EvalReport>,
    pub models: Vec<Model>,
    pub histories: Vec<History>,
    pub upstream: Option<Model>,
}

fn run_seed(cfg: &ExperimentConfig, data: &Dataset, rep: usize, upstream: Option<Model>, policy: ExecPolicy) -> Result<SeedOutcome> {
    let base = base_seed(cfg, rep);
    let upstream = match upstream {
        Some(m) => Some(m),
        None => train_upstream(cfg, rep)?,
    };
    let up_ckpt = upstream.as_ref().map(Checkpoint::from_model).transpose()?;
    let mut models = Vec::new();
    let mut histories = Vec::new();
    for j in 0..cfg.trained_models() {
        let mut init_rng = Rng::new(base).fork(TAG_MEMBER_INIT + j as u64);
        let mut model = match &up_ckpt {
            Some(ck) => adapt_upstream(ck, &cfg.model, &mut init_rng)?,
            None => build_model(&cfg.model, &mut init_rng)?,
        };
        let mut tc = cfg.train.clone();
        tc.seed = derived_seed(base, TAG_MEMBER_TRAIN + j as u64);
        histories.push(train(&mut model, data, &tc, &cfg.eval)?);
        models.push(model);
    }
    let pred = match cfg.method {
        Method::Standard => Predictor::Model(&models[0]),
        Method::DeepEnsemble => Predictor::DeepEnsemble(&models),
        Method::McDropout => Predictor::McDropout { model: &models[0], samples: cfg.members },
    };
    let eval_rng = Rng::new(base).fork(TAG_EVAL);
    let mut report = evaluate_report(&pred, data, &cfg.eval, &eval_rng, policy)?;
    report.flops_train_giga = cfg.train_gflops()?;
    let shift = match &data.shift {
        Some(split) => {
            let mut r = evaluate(&pred, split, &cfg.eval, &eval_rng.fork(3), policy)?.acc.report()?;
            r.flops_train_giga = report.flops_train_giga;
            Some(r)
        }
        None => None,
    };
    Ok(SeedOutcome { rep, report, shift, models, histories, upstream })
}

/// Trains and evaluates every repetition; nothing is written.
pub fn run_seeds(cfg: &ExperimentConfig, policy: ExecPolicy) -> Result<Vec<SeedOutcome>> {
    run_seeds_with(cfg, &HashMap::new(), policy)
}

fn run_seeds_with(cfg: &ExperimentConfig, upstreams: &HashMap<String, Model>, policy: ExecPolicy) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data)?;
    let reps: Vec<usize> = (0..cfg.repetitions).collect();
    try_map(policy, &reps, |&r| {
        let cached = match upstream_key(cfg, r)? {
            Some(k) => upstreams.get(&k).cloned(),
            None => None,
        };
        run_seed(cfg, &data, r, cached, policy)
    })
}

/// Named scalars of a report in a fixed order.
pub fn report_scalars(r: &EvalReport) -> Vec<(String, f64)> {
    let mut v = vec![
        ("nll".to_string(), r.nll),
        ("error_pct".to_string(), r.error_pct),
        ("ece".to_string(), r.ece),
    ];
    for (name, x) in [
        ("kl_diversity", r.kl_diversity),
        ("cosine_similarity", r.cosine_similarity),
        ("normalized_disagreement", r.normalized_disagreement),
    ] {
        if let Some(x) = x {
            v.push((name.to_string(), x));
        }
    }
    v.push(("flops_train_giga".to_string(), r.flops_train_giga));
    for (key, m) in &r.ood {
        v.push((format!("ood.{key}.fpr95"), m.fpr95));
        v.push((format!("ood.{key}.auc_roc"), m.auc_roc));
        v.push((format!("ood.{key}.auc_pr"), m.auc_pr));
    }
    for (shots, err) in &r.fewshot {
        v.push((format!("fewshot.{shots}"), *err));
    }
    v
}

/// One summary line: mean and standard error of the mean over the seeds reporting it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean and standard error (sample standard deviation over `√n`, 0 for one value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(outcomes: &[SeedOutcome]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |name: String, x: f64| {
        if !values.contains_key(&name) {
            order.push(name.clone());
        }
        values.entry(name).or_default().push(x);
    };
    for o in outcomes {
        for (k, x) in report_scalars(&o.report) {
            push(k, x);
        }
        if let Some(s) = &o.shift {
            for (k, x) in report_scalars(s) {
                push(format!("shift.{k}"), x);
            }
        }
    }
    order
        .into_iter()
        .map(|metric| {
            let xs = &values[&metric];
            let (mean, stderr) = mean_stderr(xs);
            SummaryRow { metric, mean, stderr, n: xs.len() }
        })
        .collect()
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_seed(dir: &Path, cfg: &ExperimentConfig, o: &SeedOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.json"), o.report.to_json()?.as_bytes())?;
    if let Some(s) = &o.shift {
        write_atomic(&dir.join("shift_report.json"), s.to_json()?.as_bytes())?;
    }
    let single = o.models.len() == 1;
    for (j, (m, h)) in o.models.iter().zip(&o.histories).enumerate() {
        let stem = if single { "model".to_string() } else { format!("member_{j}") };
        Checkpoint::from_model(m)?.save(&dir.join(format!("{stem}.ckpt")))?;
        let mut buf = Vec::new();
        h.write_csv(&mut buf)?;
        let hist = if single { "history.csv".to_string() } else { format!("history_{j}.csv") };
        write_atomic(&dir.join(hist), &buf)?;
    }
    if let Some(u) = &o.upstream {
        Checkpoint::from_model(u)?.save(&dir.join("upstream.ckpt"))?;
    }
    log::info!("seed {} of {}: nll {:.4}, error {:.2}%", o.rep, cfg.repetitions, o.report.nll, o.report.error_pct);
    Ok(())
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outcomes: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// Trains every seed and writes `seed_<r>/` artifacts, `summary.csv` and the
/// resolved `config.json` under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, policy: ExecPolicy) -> Result<RunOutput> {
    let outcomes = run_seeds(cfg, policy)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    for o in &outcomes {
        write_seed(&cfg.output_dir.join(format!("seed_{}", o.rep)), cfg, o)?;
    }
    let summary = summarize(&outcomes);
    write_atomic(&cfg.output_dir.join("summary.csv"), &csv_bytes(&summary)?)?;
    write_atomic(&cfg.output_dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(RunOutput { outcomes, summary })
}

/// One kind of sweep row; the grid axes that apply to it are crossed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub variant: Variant,
    #[serde(default)]
    pub method: Method,
    /// Per-entry axes override the sweep-wide ones.
    #[serde(default)]
    pub k: Option<Vec<usize>>,
    #[serde(default)]
    pub m: Option<Vec<usize>>,
    #[serde(default)]
    pub experts: Option<Vec<usize>>,
}

fn d_family() -> String {
    "tiny".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Shared settings; `base.output_dir` receives `sweep.csv`.
    pub base: ExperimentConfig,
    pub entries: Vec<SweepEntry>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default)]
    pub experts: Vec<usize>,
    /// Value of the `family` column.
    #[serde(default = "d_family")]
    pub family: String,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// A fully specified grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub variant_label: String,
    pub k: Option<usize>,
    pub m: usize,
    pub experts: Option<usize>,
    pub config: ExperimentConfig,
}

fn has_k(v: Variant, spec: &ModelSpec) -> bool {
    match v {
        Variant::Vit | Variant::Be => false,
        Variant::Mimo => spec.mimo_base == Variant::Vmoe,
        _ => true,
    }
}

fn has_model_m(v: Variant) -> bool {
    matches!(v, Variant::Pbe | Variant::OnlyTiling | Variant::OnlyPartitioning | Variant::Be | Variant::Mimo)
}

/// Expands the grid. Axes a variant has no use for collapse to one value:
/// `K` for dense models, `E` for models without experts and `M` for
/// single-member standard models. Duplicate cells are dropped.
pub fn sweep_cells(sweep: &SweepConfig) -> Result<Vec<SweepCell>> {
    if sweep.entries.is_empty() {
        return config_err("sweep needs at least one entry");
    }
    let base = &sweep.base;
    let or_base = |list: &Vec<usize>, v: usize| if list.is_empty() { vec![v] } else { list.clone() };
    let mut cells: Vec<SweepCell> = Vec::new();
    for entry in &sweep.entries {
        let mut spec = base.model.clone();
        spec.variant = entry.variant;
        let sparse = has_k(entry.variant, &spec);
        let ks = if sparse { entry.k.clone().unwrap_or_else(|| or_base(&sweep.k, base.model.k)) } else { vec![base.model.k] };
        let es = if sparse { entry.experts.clone().unwrap_or_else(|| or_base(&sweep.experts, base.model.experts)) } else { vec![base.model.experts] };
        let ensemble_axis = has_model_m(entry.variant) || entry.method != Method::Standard;
        let ms = if ensemble_axis { entry.m.clone().unwrap_or_else(|| or_base(&sweep.m, 1)) } else { vec![1] };
        if ks.is_empty() || es.is_empty() || ms.is_empty() {
            return config_err(format!("entry `{}` has an empty axis", entry.variant.name()));
        }
        for &e in &es {
            for &k in &ks {
                for &m in &ms {
                    let mut cfg = base.clone();
                    cfg.model = spec.clone();
                    cfg.model.k = k;
                    cfg.model.experts = e;
                    cfg.method = entry.method;
                    if entry.method == Method::Standard {
                        cfg.model.m = if has_model_m(entry.variant) { m } else { 1 };
                        cfg.members = 1;
                    } else {
                        cfg.model.m = 1;
                        cfg.members = m;
                    }
                    cfg.validate().map_err(|err| Error::Config(format!("sweep cell {} K={k} M={m} E={e}: {err}", entry.variant.name())))?;
                    let variant_label = match entry.method {
                        Method::Standard => entry.variant.name().to_string(),
                        other => format!("{}_{}", other.name(), entry.variant.name()),
                    };
                    let k_col = sparse.then_some(k);
                    let e_col = sparse.then_some(e);
                    let mut label = variant_label.clone();
                    if let Some(k) = k_col {
                        label.push_str(&format!(" K={k}"));
                    }
                    label.push_str(&format!(" M={m}"));
                    if let Some(e) = e_col {
                        label.push_str(&format!(" E={e}"));
                    }
                    if cells.iter().any(|c| c.label == label) {
                        continue;
                    }
                    cells.push(SweepCell { label, variant_label, k: k_col, m, experts: e_col, config: cfg });
                }
            }
        }
    }
    Ok(cells)
}

/// One output line of a sweep. The first seven columns are the analyzer's.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub metric: f64,
    pub gflops: f64,
    pub family: String,
    pub variant: String,
    pub k: Option<usize>,
    pub m: usize,
    pub experts: Option<usize>,
    pub nll_stderr: f64,
    pub error_pct: f64,
    pub ece: f64,
    pub kl_diversity: Option<f64>,
    pub train_gflops: f64,
    pub seeds: usize,
}

impl SweepRow {
    pub fn cost_point(&self) -> CostPoint {
        CostPoint {
            label: self.label.clone(),
            metric: self.metric,
            gflops: self.gflops,
            family: Some(self.family.clone()),
            variant: Some(self.variant.clone()),
            k: self.k,
            m: Some(self.m),
        }
    }
}

fn mean_of(rows: &[SummaryRow], name: &str) -> Option<(f64, f64)> {
    rows.iter().find(|r| r.metric == name).map(|r| (r.mean, r.stderr))
}

/// Runs every cell (upstream models are trained once per distinct setup and
/// seed) and returns the rows in grid order.
pub fn run_sweep_rows(sweep: &SweepConfig, policy: ExecPolicy) -> Result<Vec<(SweepCell, Vec<SeedOutcome>, SweepRow)>> {
    let cells = sweep_cells(sweep)?;
    let mut jobs: Vec<(String, ExperimentConfig, usize)> = Vec::new();
    for c in &cells {
        for r in 0..c.config.repetitions {
            if let Some(key) = upstream_key(&c.config, r)? {
                if !jobs.iter().any(|(k, _, _)| *k == key) {
                    jobs.push((key, c.config.clone(), r));
                }
            }
        }
    }
    let trained = try_map(policy, &jobs, |(_, cfg, r)| train_upstream(cfg, *r))?;
    let upstreams: HashMap<String, Model> =
        jobs.into_iter().zip(trained).filter_map(|((k, _, _), m)| m.map(|m| (k, m))).collect();
    let results = try_map(policy, &cells, |c| run_seeds_with(&c.config, &upstreams, policy))?;
    cells
        .into_iter()
        .zip(results)
        .map(|(cell, outcomes)| {
            let summary = summarize(&outcomes);
            let (nll, nll_se) = mean_of(&summary, "nll").expect("nll is always reported");
            let row = SweepRow {
                label: cell.label.clone(),
                metric: nll,
                gflops: cell.config.inference_gflops()?,
                family: sweep.family.clone(),
                variant: cell.variant_label.clone(),
                k: cell.k,
                m: cell.m,
                experts: cell.experts,
                nll_stderr: nll_se,
                error_pct: mean_of(&summary, "error_pct").map_or(f64::NAN, |v| v.0),
                ece: mean_of(&summary, "ece").map_or(f64::NAN, |v| v.0),
                kl_diversity: mean_of(&summary, "kl_diversity").map(|v| v.0),
                train_gflops: cell.config.train_gflops()?,
                seeds: outcomes.len(),
            };
            Ok((cell, outcomes, row))
        })
        .collect()
}

/// Runs the sweep and writes `sweep.csv` under `base.output_dir`.
pub fn run_sweep(sweep: &SweepConfig, policy: ExecPolicy) -> Result<Vec<SweepRow>> {
    let rows: Vec<SweepRow> = run_sweep_rows(sweep, policy)?.into_iter().map(|(_, _, r)| r).collect();
    std::fs::create_dir_all(&sweep.base.output_dir)?;
    write_atomic(&sweep.base.output_dir.join("sweep.csv"), &csv_bytes(&rows)?)?;
    Ok(rows)
}
