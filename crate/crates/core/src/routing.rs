//! Noisy top-K gating, partitioned gating and expert capacity.
//!
//! The graph form ([`gate_graph`]) is what the model trains through. The plain
//! tensor entry points ([`gate_k`], [`partitioned_gate`]) run the same code on
//! constant inputs, so both paths agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Whether a forward pass is training or evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// Noise settings shared by every router of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// σ; `None` means `1/E`.
    pub sigma: Option<f64>,
    pub multiplier: f64,
    pub eval_noise_enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: None, multiplier: 1.0, eval_noise_enabled: false }
    }
}

impl NoiseConfig {
    pub fn sigma_for(&self, experts: usize) -> f64 {
        self.sigma.unwrap_or(1.0 / experts as f64)
    }

    /// Effective noise standard deviation, 0 when no noise is drawn.
    pub fn active_scale(&self, experts: usize, phase: Phase) -> f64 {
        let on = phase == Phase::Train || self.eval_noise_enabled;
        if on {
            self.sigma_for(experts) * self.multiplier
        } else {
            0.0
        }
    }
}

/// Router weights: one `[E×D]` matrix, or `M` blocks of `[(E/M)×D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub w: Vec<Tensor>,
    pub noise: NoiseConfig,
}

impl RouterParams {
    pub fn single(w: Tensor) -> Self {
        Self { w: vec![w], noise: NoiseConfig::default() }
    }

    pub fn partitioned(w: Vec<Tensor>) -> Result<Self> {
        if w.is_empty() {
            return config_err("partitioned router needs at least one block");
        }
        let rows = w[0].rows();
        if w.iter().any(|b| b.rows() != rows || b.cols() != w[0].cols()) {
            return config_err("router blocks must share one shape");
        }
        Ok(Self { w, noise: NoiseConfig::default() })
    }

    pub fn with_noise(mut self, noise: NoiseConfig) -> Self {
        self.noise = noise;
        self
    }

    pub fn experts(&self) -> usize {
        self.w.iter().map(|b| b.rows()).sum()
    }

    pub fn members(&self) -> usize {
        self.w.len()
    }
}

/// Disjoint contiguous blocks of experts, one per ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub members: usize,
    pub experts: usize,
}

impl Partition {
    pub fn new(experts: usize, members: usize) -> Result<Self> {
        if members == 0 || experts == 0 || experts % members != 0 {
            return config_err(format!("{experts} experts cannot be split into {members} equal blocks"));
        }
        Ok(Self { members, experts })
    }

    pub fn block_size(&self) -> usize {
        self.experts / self.members
    }

    pub fn member_of(&self, expert: usize) -> usize {
        expert / self.block_size()
    }

    pub fn block(&self, member: usize) -> std::ops::Range<usize> {
        let s = self.block_size();
        member * s..(member + 1) * s
    }
}

/// Per-expert token budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityConfig {
    Unbounded,
    Ratio(f64),
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig::Unbounded
    }
}

/// Selected experts and their gate values, `slots` entries per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub tokens: usize,
    pub slots: usize,
    /// Global expert ids, token-major.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub dropped: Vec<bool>,
}

impl RoutingDecision {
    pub fn token_indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.slots..(i + 1) * self.slots]
    }

    pub fn token_weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.slots..(i + 1) * self.slots]
    }

    /// Gate weight of slot `s` after capacity drops.
    pub fn effective_weight(&self, s: usize) -> f64 {
        if self.dropped[s] {
            0.0
        } else {
            self.weights[s]
        }
    }
}

/// The `k` largest entries of `row`, descending, ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// How rows map onto router blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateLayout {
    /// One router over all rows.
    Single,
    /// Member-major tiled rows; member `m` uses block `m` only.
    Tiled,
    /// Every row is routed in every block; `K·M` slots per token.
    AllBlocks,
}

/// Router logits of one block, kept for the auxiliary losses.
#[derive(Debug, Clone)]
pub struct BlockLogits {
    /// Input rows routed by this block.
    pub rows: Vec<usize>,
    pub clean: Var,
    /// Equal to `clean` when no noise was drawn.
    pub noisy: Var,
    /// Standard deviation of the noise actually added; 0 when off.
    pub sigma: f64,
    pub k: usize,
}

#[derive(Debug)]
pub struct GateOutput {
    pub decision: RoutingDecision,
    /// `[tokens·slots × 1]` gate values on the tape, token-major.
    pub weights: Var,
    pub blocks: Vec<BlockLogits>,
}

/// Noisy top-K gating on the tape.
///
/// One `[N×E]` noise matrix is drawn from `rng` whenever noise is active;
/// block `m` reads its own column range of it.
pub fn gate_graph(
    g: &mut Graph,
    h: Var,
    routers: &[Var],
    noise: &NoiseConfig,
    k: usize,
    layout: GateLayout,
    rng: &mut Rng,
    phase: Phase,
) -> Result<GateOutput> {
    let n = g.value(h).rows();
    let members = routers.len();
    if members == 0 {
        return config_err("no router weights");
    }
    let per_block = g.value(routers[0]).rows();
    let experts = per_block * members;
    if layout == GateLayout::Single && members != 1 {
        return config_err("single-router gating given a partitioned router");
    }
    if k == 0 || k > per_block {
        return config_err(format!("K={k} with {per_block} experts available per router"));
    }
    if layout == GateLayout::Tiled && n % members != 0 {
        return dim_err(format!("{n} tiled rows not divisible by M={members}"));
    }
    let scale = noise.active_scale(experts, phase);
    let eps = if scale != 0.0 { Some(rng.gaussian(&[n, experts])) } else { None };

    let block_rows: Vec<Vec<usize>> = match layout {
        GateLayout::Single | GateLayout::AllBlocks => vec![(0..n).collect(); members],
        GateLayout::Tiled => {
            let b = n / members;
            (0..members).map(|m| (m * b..(m + 1) * b).collect()).collect()
        }
    };
    let slots = if layout == GateLayout::AllBlocks { k * members } else { k };

    let mut indices = vec![0usize; n * slots];
    let mut weights = vec![0.0; n * slots];
    let mut weight_parts = Vec::with_capacity(members);
    // position in the final token-major layout for each gathered weight, block by block
    let mut order = Vec::with_capacity(n * slots);
    let mut blocks = Vec::with_capacity(members);

    for (m, rows) in block_rows.into_iter().enumerate() {
        let hm = if layout == GateLayout::Tiled && members > 1 { g.gather_rows(h, rows.clone())? } else { h };
        let clean = g.matmul_nt(hm, routers[m])?;
        let noisy = match &eps {
            Some(e) => {
                let offset = m * per_block;
                let mut nz = Tensor::zeros(&[rows.len(), per_block]);
                for (li, &r) in rows.iter().enumerate() {
                    for j in 0..per_block {
                        nz.data_mut()[li * per_block + j] = scale * e.get2(r, offset + j);
                    }
                }
                g.add_const(clean, &nz)?
            }
            None => clean,
        };
        let probs = g.softmax(noisy)?;
        let pv = g.value(probs).clone();
        let mut picks = Vec::with_capacity(rows.len() * k);
        for (li, &r) in rows.iter().enumerate() {
            let top = top_k_indices(pv.row(li), k);
            for (j, &e) in top.iter().enumerate() {
                let slot = match layout {
                    GateLayout::AllBlocks => r * slots + m * k + j,
                    _ => r * slots + j,
                };
                indices[slot] = m * per_block + e;
                weights[slot] = pv.get2(li, e);
                picks.push((li, e));
                order.push(slot);
            }
        }
        weight_parts.push(g.gather_elems(probs, picks)?);
        blocks.push(BlockLogits { rows, clean, noisy, sigma: scale, k });
    }

    let gathered = if weight_parts.len() == 1 { weight_parts[0] } else { g.concat_rows(weight_parts)? };
    let identity = order.iter().enumerate().all(|(i, &s)| i == s);
    let wvar = if identity {
        gathered
    } else {
        let mut inv = vec![0usize; order.len()];
        for (i, &s) in order.iter().enumerate() {
            inv[s] = i;
        }
        g.gather_rows(gathered, inv)?
    };
    let decision = RoutingDecision { tokens: n, slots, indices, weights, dropped: vec![false; n * slots] };
    Ok(GateOutput { decision, weights: wvar, blocks })
}

fn run_constant(h: &Tensor, router: &RouterParams, k: usize, layout: GateLayout, rng: &mut Rng, phase: Phase) -> Result<RoutingDecision> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let rv: Vec<Var> = router.w.iter().map(|w| g.constant(w.clone())).collect();
    Ok(gate_graph(&mut g, hv, &rv, &router.noise, k, layout, rng, phase)?.decision)
}

/// `top_K(softmax(W h + σ·multiplier·ε))` for every row of `h`.
pub fn gate_k(h: &Tensor, router: &RouterParams, k: usize, rng: &mut Rng, phase: Phase) -> Result<RoutingDecision> {
    if router.members() != 1 {
        return config_err("gate_k needs a single router");
    }
    run_constant(h, router, k, GateLayout::Single, rng, phase)
}

/// Gating of member-major tiled rows, each member within its own block.
pub fn partitioned_gate(h_tiled: &Tensor, router: &RouterParams, k: usize, rng: &mut Rng, phase: Phase) -> Result<RoutingDecision> {
    run_constant(h_tiled, router, k, GateLayout::Tiled, rng, phase)
}

/// Gating of untiled rows in every block.
pub fn all_blocks_gate(h: &Tensor, router: &RouterParams, k: usize, rng: &mut Rng, phase: Phase) -> Result<RoutingDecision> {
    run_constant(h, router, k, GateLayout::AllBlocks, rng, phase)
}

/// Marks assignments beyond `ceil(C·N·slots/E)` per expert as dropped, filling
/// token by token and, within a token, slot by slot.
pub fn capacity_filter(decision: &RoutingDecision, cap: CapacityConfig, experts: usize) -> RoutingDecision {
    let mut out = decision.clone();
    let CapacityConfig::Ratio(c) = cap else { return out };
    let limit = (c * (decision.tokens * decision.slots) as f64 / experts as f64).ceil() as usize;
    let mut used = vec![0usize; experts];
    for s in 0..decision.indices.len() {
        let e = decision.indices[s];
        if used[e] < limit {
            used[e] += 1;
        } else {
            out.dropped[s] = true;
        }
    }
    out
}
