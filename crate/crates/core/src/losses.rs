//! Training objective: member cross-entropy plus router balancing terms.
//!
//! Balancing follows the squared-coefficient-of-variation forms: importance is
//! the CV² of per-expert summed clean softmax mass, load is the CV² of the
//! smooth probability that each expert survives top-K under fresh noise.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::model::SparseAux;
use crate::numerics::{normal_cdf, softmax_rows, Graph, Tensor, Var};
use crate::routing::{top_k_indices, BlockLogits};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean over members of each member's cross-entropy.
    #[default]
    MemberAvg,
    /// Cross-entropy of the averaged prediction.
    EnsembleCe,
}

fn d_aux() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "d_aux")]
    pub aux_weight: f64,
    #[serde(default)]
    pub loss_mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { aux_weight: 0.1, loss_mode: LossMode::MemberAvg }
    }
}

fn clamped_ln(p: f64, warned: &mut bool) -> f64 {
    if p < PROB_CLAMP {
        if !*warned {
            log::warn!("probability {p:e} at the true label clamped to {PROB_CLAMP:e}");
            *warned = true;
        }
        PROB_CLAMP.ln()
    } else {
        p.ln()
    }
}

fn check_members(member_probs: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let s = member_probs.shape();
    if s.len() != 3 || s[1] != labels.len() {
        return dim_err(format!("member probs {s:?} for {} labels", labels.len()));
    }
    if labels.iter().any(|&y| y >= s[2]) {
        return dim_err("label out of range");
    }
    Ok((s[0], s[1], s[2]))
}

/// `(1/M) Σ_m mean_b −ln p_m(y_b)` on `[M×B×C]` probabilities.
pub fn member_avg_cross_entropy(member_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, b, c) = check_members(member_probs, labels)?;
    let d = member_probs.data();
    let mut warned = false;
    let mut total = 0.0;
    for mi in 0..m {
        for (bi, &y) in labels.iter().enumerate() {
            total -= clamped_ln(d[(mi * b + bi) * c + y], &mut warned);
        }
    }
    Ok(total / (m * b) as f64)
}

/// `mean_b −ln mean_m p_m(y_b)`.
pub fn ensemble_cross_entropy(member_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, b, c) = check_members(member_probs, labels)?;
    let d = member_probs.data();
    let mut warned = false;
    let mut total = 0.0;
    for (bi, &y) in labels.iter().enumerate() {
        let p = (0..m).map(|mi| d[(mi * b + bi) * c + y]).sum::<f64>() / m as f64;
        total -= clamped_ln(p, &mut warned);
    }
    Ok(total / b as f64)
}

/// Data term on the tape. `labels[m]` are member `m`'s targets.
pub fn data_loss_graph(g: &mut Graph, member_logits: &[Var], labels: &[Vec<usize>], mode: LossMode) -> Result<Var> {
    if member_logits.is_empty() || member_logits.len() != labels.len() {
        return dim_err("one label vector per member required");
    }
    let m = member_logits.len() as f64;
    match mode {
        LossMode::MemberAvg => {
            let mut acc: Option<Var> = None;
            for (&lg, ys) in member_logits.iter().zip(labels) {
                let lp = g.log_softmax(lg)?;
                let picked = g.gather_elems(lp, ys.iter().enumerate().map(|(i, &y)| (i, y)).collect())?;
                let mean = g.mean(picked);
                acc = Some(match acc {
                    Some(a) => g.add(a, mean)?,
                    None => mean,
                });
            }
            Ok(g.scale(acc.expect("members"), -1.0 / m))
        }
        LossMode::EnsembleCe => {
            let mut acc: Option<Var> = None;
            for (&lg, ys) in member_logits.iter().zip(labels) {
                let p = g.softmax(lg)?;
                let picked = g.gather_elems(p, ys.iter().enumerate().map(|(i, &y)| (i, y)).collect())?;
                acc = Some(match acc {
                    Some(a) => g.add(a, picked)?,
                    None => picked,
                });
            }
            let mean_p = g.scale(acc.expect("members"), 1.0 / m);
            let lp = g.log(mean_p);
            let nll = g.mean(lp);
            Ok(g.scale(nll, -1.0))
        }
    }
}

fn cv_squared(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean.abs() < 1e-300 {
        return 0.0;
    }
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    var / (mean * mean)
}

/// CV² of per-expert column sums of the clean softmax.
pub fn importance_loss(clean_softmax: &Tensor) -> f64 {
    let e = clean_softmax.cols();
    let mut imp = vec![0.0; e];
    for row in clean_softmax.data().chunks(e.max(1)) {
        for (a, p) in imp.iter_mut().zip(row) {
            *a += p;
        }
    }
    cv_squared(&imp)
}

/// For each `(token, expert)`, the `(row, col)` of the K-th largest noisy logit
/// among the other experts; `None` when fewer than K others exist.
fn thresholds(noisy: &Tensor, k: usize) -> Vec<Option<(usize, usize)>> {
    let (n, e) = (noisy.rows(), noisy.cols());
    let mut out = Vec::with_capacity(n * e);
    for i in 0..n {
        let row = noisy.row(i);
        let order = top_k_indices(row, e);
        for ex in 0..e {
            let nth = order.iter().filter(|&&j| j != ex).nth(k - 1);
            out.push(nth.map(|&j| (i, j)));
        }
    }
    out
}

/// CV² of expected per-expert load, `Φ((clean − τ)/σ)` summed over tokens.
/// With `σ = 0` the load is the hard top-K membership count.
pub fn load_loss(clean_logits: &Tensor, noisy_logits: &Tensor, sigma: f64, k: usize) -> Result<f64> {
    if clean_logits.shape() != noisy_logits.shape() {
        return dim_err("clean and noisy logits differ in shape");
    }
    let e = clean_logits.cols();
    let mut load = vec![0.0; e];
    if sigma == 0.0 {
        for i in 0..noisy_logits.rows() {
            for j in top_k_indices(noisy_logits.row(i), k) {
                load[j] += 1.0;
            }
        }
    } else {
        for (idx, t) in thresholds(noisy_logits, k).into_iter().enumerate() {
            let (i, ex) = (idx / e, idx % e);
            load[ex] += match t {
                Some((r, c)) => normal_cdf((clean_logits.get2(i, ex) - noisy_logits.get2(r, c)) / sigma),
                None => 1.0,
            };
        }
    }
    Ok(cv_squared(&load))
}

/// `(importance + load) / 2` of one router block.
pub fn omega(clean_logits: &Tensor, noisy_logits: &Tensor, sigma: f64, k: usize) -> Result<f64> {
    let imp = importance_loss(&softmax_rows(clean_logits)?);
    Ok(0.5 * (imp + load_loss(clean_logits, noisy_logits, sigma, k)?))
}

/// Mean of per-block Ω; blocks are `(clean, noisy)` slices owned by each member.
pub fn omega_partition(blocks: &[(Tensor, Tensor)], sigma: f64, k: usize) -> Result<f64> {
    if blocks.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, n) in blocks {
        total += omega(c, n, sigma, k)?;
    }
    Ok(total / blocks.len() as f64)
}

/// `data + λ · mean(Ω per layer)`.
pub fn total_loss(data_loss: f64, layer_omegas: &[f64], aux_weight: f64) -> f64 {
    if layer_omegas.is_empty() {
        return data_loss;
    }
    data_loss + aux_weight * layer_omegas.iter().sum::<f64>() / layer_omegas.len() as f64
}

/// Ω of one router block on the tape.
pub fn omega_graph(g: &mut Graph, b: &BlockLogits) -> Result<Var> {
    let probs = g.softmax(b.clean)?;
    let imp = g.sum_rows(probs);
    let importance = g.cv_squared(imp);

    let (n, e) = (g.value(b.clean).rows(), g.value(b.clean).cols());
    let load = if b.sigma == 0.0 {
        let noisy = g.value(b.noisy).clone();
        let mut counts = vec![0.0; e];
        for i in 0..n {
            for j in top_k_indices(noisy.row(i), b.k) {
                counts[j] += 1.0;
            }
        }
        let c = g.constant(Tensor::vector(counts));
        g.cv_squared(c)
    } else {
        let th = thresholds(g.value(b.noisy), b.k);
        let mut live = Vec::new();
        let mut tau_at = Vec::new();
        let mut certain = vec![0.0; e];
        for (idx, t) in th.into_iter().enumerate() {
            match t {
                Some(rc) => {
                    live.push((idx / e, idx % e));
                    tau_at.push(rc);
                }
                None => certain[idx % e] += 1.0,
            }
        }
        let base = g.constant(Tensor::new(vec![e, 1], certain)?);
        if live.is_empty() {
            g.cv_squared(base)
        } else {
            let targets: Vec<usize> = live.iter().map(|&(_, ex)| ex).collect();
            let clean = g.gather_elems(b.clean, live)?;
            let tau = g.gather_elems(b.noisy, tau_at)?;
            let diff = g.sub(clean, tau)?;
            let z = g.scale(diff, 1.0 / b.sigma);
            let p = g.normal_cdf(z);
            let per_expert = g.scatter_add_rows(p, targets, e)?;
            let total = g.add(per_expert, base)?;
            g.cv_squared(total)
        }
    };
    let sum = g.add(importance, load)?;
    Ok(g.scale(sum, 0.5))
}

/// Mean over router blocks of Ω for one sparse layer.
pub fn omega_partition_graph(g: &mut Graph, layer: &SparseAux) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for b in &layer.routers {
        let o = omega_graph(g, b)?;
        acc = Some(match acc {
            Some(a) => g.add(a, o)?,
            None => o,
        });
    }
    let acc = acc.ok_or_else(|| crate::Error::Config("sparse layer without routers".into()))?;
    Ok(g.scale(acc, 1.0 / layer.routers.len() as f64))
}

/// Aux term: mean over sparse layers of [`omega_partition_graph`]; `None` without sparse layers.
pub fn aux_loss_graph(g: &mut Graph, layers: &[SparseAux]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for l in layers {
        let o = omega_partition_graph(g, l)?;
        acc = Some(match acc {
            Some(a) => g.add(a, o)?,
            None => o,
        });
    }
    Ok(acc.map(|a| g.scale(a, 1.0 / layers.len() as f64)))
}

/// Data term plus `λ ·` aux term; returns `(total, aux)`.
pub fn total_loss_graph(g: &mut Graph, data: Var, layers: &[SparseAux], aux_weight: f64) -> Result<(Var, Option<Var>)> {
    match aux_loss_graph(g, layers)? {
        Some(aux) => {
            let w = g.scale(aux, aux_weight);
            Ok((g.add(data, w)?, Some(aux)))
        }
        None => Ok((data, None)),
    }
}
