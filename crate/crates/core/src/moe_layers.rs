//! Expert MLPs, the sparse layer variants, batch-ensemble dense layers and tiling.
//!
//! Every variant first writes weighted expert outputs into one row per
//! `(token, slot)`. The multi-head output is that slot tensor. The other modes
//! sum slots back onto tokens.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::numerics::{dense, matmul, Graph, Rng, Tensor, Var};
use crate::routing::{capacity_filter, gate_graph, CapacityConfig, GateLayout, GateOutput, NoiseConfig, Phase, RouterParams};

/// Standard deviation of the small-Gaussian initialisation.
pub const INIT_STD: f64 = 0.02;

/// Initialisation of kernels and routers. Embeddings and the classifier always
/// use the small Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated `N(0, 0.02²)` kernels and `N(0, 0.02²)` routers.
    #[default]
    Small,
    /// Truncated `N(0, 1/fan_in)` kernels and `N(0, 1/D)` routers.
    Lecun,
}

impl InitScheme {
    /// A `[fan_in × fan_out]` kernel.
    pub fn kernel(self, rng: &mut Rng, shape: &[usize]) -> Tensor {
        match self {
            InitScheme::Small => trunc_normal(rng, shape, INIT_STD),
            InitScheme::Lecun => lecun_normal(rng, shape),
        }
    }

    /// A `[experts × D]` router.
    pub fn router(self, rng: &mut Rng, experts: usize, d: usize) -> Tensor {
        let std = match self {
            InitScheme::Small => INIT_STD,
            InitScheme::Lecun => 1.0 / (d as f64).sqrt(),
        };
        rng.gaussian(&[experts, d]).scale(std)
    }
}

/// `N(0, std²)` truncated at two standard deviations.
pub fn trunc_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    rng.truncated_gaussian(shape, 2.0).scale(std)
}

/// Truncated normal with standard deviation `1/√fan_in` for a `[fan_in × fan_out]` kernel.
pub fn lecun_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    trunc_normal(rng, shape, 1.0 / (shape[0] as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMLP {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ExpertMLP {
    pub fn init(d: usize, f: usize, q: usize, rng: &mut Rng) -> Self {
        Self::init_with(d, f, q, InitScheme::Small, rng)
    }

    pub fn init_with(d: usize, f: usize, q: usize, scheme: InitScheme, rng: &mut Rng) -> Self {
        Self {
            w1: scheme.kernel(rng, &[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: scheme.kernel(rng, &[f, q]),
            b2: Tensor::zeros(&[q]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    /// Evaluates the expert on every row of `x`, without dropout.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.constants(&mut g);
        let y = expert_graph(&mut g, xv, &e, None)?;
        Ok(g.value(y).clone())
    }

    fn constants(&self, g: &mut Graph) -> ExpertVars {
        ExpertVars {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

/// Tape handles of one expert.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `GELU(x W1 + b1) W2 + b2`, with an optional inverted-dropout mask on the hidden layer.
pub fn expert_graph(g: &mut Graph, x: Var, e: &ExpertVars, mask: Option<Tensor>) -> Result<Var> {
    let a = dense(g, x, e.w1, Some(e.b1))?;
    let mut hdn = g.gelu(a);
    if let Some(m) = mask {
        hdn = g.mul_const(hdn, m)?;
    }
    dense(g, hdn, e.w2, Some(e.b2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    Moe,
    Pbe,
    Multihead,
    OnlyTiling,
    OnlyPartitioning,
}

impl MoeMode {
    fn layout(self) -> GateLayout {
        match self {
            MoeMode::Moe | MoeMode::OnlyTiling | MoeMode::Multihead => GateLayout::Single,
            MoeMode::Pbe => GateLayout::Tiled,
            MoeMode::OnlyPartitioning => GateLayout::AllBlocks,
        }
    }

    pub fn is_partitioned(self) -> bool {
        matches!(self, MoeMode::Pbe | MoeMode::OnlyPartitioning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub k: usize,
    pub mode: MoeMode,
    pub capacity: CapacityConfig,
    pub dropout_rate: f64,
    pub noise: NoiseConfig,
}

impl MoeConfig {
    pub fn new(k: usize, mode: MoeMode) -> Self {
        Self { k, mode, capacity: CapacityConfig::Unbounded, dropout_rate: 0.1, noise: NoiseConfig::default() }
    }

    pub fn validate(&self, experts: usize, members: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return config_err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if let CapacityConfig::Ratio(c) = self.capacity {
            if !(c > 0.0) {
                return config_err("capacity ratio must be positive");
            }
        }
        if self.mode.is_partitioned() {
            if members == 0 || experts % members != 0 {
                return config_err(format!("{experts} experts cannot be split into {members} blocks"));
            }
        } else if members != 1 {
            return config_err(format!("{:?} layers need a single router", self.mode));
        }
        let per = experts / members.max(1);
        if self.k == 0 || self.k > per {
            return config_err(format!("K={} with {per} experts per router", self.k));
        }
        Ok(())
    }
}

/// A sparse layer with concrete parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub config: MoeConfig,
    pub experts: Vec<ExpertMLP>,
    pub router: RouterParams,
}

impl MoELayer {
    pub fn init(d: usize, f: usize, experts: usize, members: usize, config: MoeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(experts, members)?;
        let ex = (0..experts).map(|_| ExpertMLP::init(d, f, d, rng)).collect();
        let per = experts / members;
        let w = (0..members).map(|_| InitScheme::Small.router(rng, per, d)).collect();
        Ok(Self { config, experts: ex, router: RouterParams { w, noise: config.noise } })
    }
}

/// Result of a sparse layer on the tape.
#[derive(Debug)]
pub struct MoeOutput {
    /// `[N×Q]`, or `[N·K×Q]` slot rows for the multi-head mode.
    pub out: Var,
    pub gate: GateOutput,
}

/// Sparse layer forward on the tape.
///
/// Routing noise comes from `rng.fork(0)`, the dropout mask of expert `e`
/// from `rng.fork(1 + e)`; `dropout` switches the mask on.
pub fn moe_graph(
    g: &mut Graph,
    h: Var,
    experts: &[ExpertVars],
    routers: &[Var],
    cfg: &MoeConfig,
    rng: &Rng,
    phase: Phase,
    dropout: bool,
) -> Result<MoeOutput> {
    let n = g.value(h).rows();
    let mut gate = gate_graph(g, h, routers, &cfg.noise, cfg.k, cfg.mode.layout(), &mut rng.fork(0), phase)?;
    gate.decision = capacity_filter(&gate.decision, cfg.capacity, experts.len());
    let d = &gate.decision;
    let slots = d.slots;
    let q = g.value(experts[0].b2).len();

    let mut slot_out: Option<Var> = None;
    for (e, ev) in experts.iter().enumerate() {
        let picked: Vec<usize> = (0..d.indices.len()).filter(|&s| d.indices[s] == e && !d.dropped[s]).collect();
        if picked.is_empty() {
            continue;
        }
        let rows: Vec<usize> = picked.iter().map(|s| s / slots).collect();
        let x = g.gather_rows(h, rows.clone())?;
        let mask = if dropout && cfg.dropout_rate > 0.0 {
            let f = g.value(ev.b1).len();
            let keep = 1.0 - cfg.dropout_rate;
            let u = rng.fork(1 + e as u64).uniform(&[n, f]);
            let full = u.map(|v| if v < keep { 1.0 / keep } else { 0.0 });
            Some(full.select_rows(&rows))
        } else {
            None
        };
        let y = expert_graph(g, x, ev, mask)?;
        let w = g.gather_rows(gate.weights, picked.clone())?;
        let yw = g.mul_col(y, w)?;
        let placed = g.scatter_add_rows(yw, picked, n * slots)?;
        slot_out = Some(match slot_out {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    let slot_out = match slot_out {
        Some(v) => v,
        None => g.constant(Tensor::zeros(&[n * slots, q])),
    };
    let out = if cfg.mode == MoeMode::Multihead {
        slot_out
    } else {
        let to_token: Vec<usize> = (0..n * slots).map(|s| s / slots).collect();
        g.scatter_add_rows(slot_out, to_token, n)?
    };
    Ok(MoeOutput { out, gate })
}

fn run_layer(h: &Tensor, layer: &MoELayer, rng: &Rng, phase: Phase) -> Result<Tensor> {
    layer.config.validate(layer.experts.len(), layer.router.members())?;
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let ev: Vec<ExpertVars> = layer.experts.iter().map(|e| e.constants(&mut g)).collect();
    let rv: Vec<Var> = layer.router.w.iter().map(|w| g.constant(w.clone())).collect();
    let mut cfg = layer.config;
    cfg.noise = layer.router.noise;
    let out = moe_graph(&mut g, hv, &ev, &rv, &cfg, rng, phase, phase == Phase::Train)?;
    Ok(g.value(out.out).clone())
}

fn require_mode(layer: &MoELayer, allowed: &[MoeMode], op: &str) -> Result<()> {
    if allowed.contains(&layer.config.mode) {
        Ok(())
    } else {
        config_err(format!("{op} cannot run a {:?} layer", layer.config.mode))
    }
}

/// `Σ_e g_e(h)·MLP_e(h)` over the selected experts.
pub fn moe_forward(h: &Tensor, layer: &MoELayer, rng: &Rng, phase: Phase) -> Result<Tensor> {
    require_mode(layer, &[MoeMode::Moe, MoeMode::OnlyTiling], "moe_forward")?;
    run_layer(h, layer, rng, phase)
}

/// Partitioned layer on member-major tiled rows.
pub fn pbe_forward(h_tiled: &Tensor, layer: &MoELayer, rng: &Rng, phase: Phase) -> Result<Tensor> {
    require_mode(layer, &[MoeMode::Pbe], "pbe_forward")?;
    if h_tiled.rows() % layer.router.members() != 0 {
        return dim_err("tiled batch not divisible by M");
    }
    run_layer(h_tiled, layer, rng, phase)
}

/// Untiled rows routed in every block; `K·M` contributions per token.
pub fn only_partitioning_forward(h: &Tensor, layer: &MoELayer, rng: &Rng, phase: Phase) -> Result<Tensor> {
    require_mode(layer, &[MoeMode::OnlyPartitioning], "only_partitioning_forward")?;
    run_layer(h, layer, rng, phase)
}

/// Stacked per-slot contributions, shape `[N, K, Q]`.
pub fn multihead_forward(h: &Tensor, layer: &MoELayer, rng: &Rng, phase: Phase) -> Result<Tensor> {
    require_mode(layer, &[MoeMode::Multihead], "multihead_forward")?;
    let out = run_layer(h, layer, rng, phase)?;
    let q = out.cols();
    out.reshape(&[h.rows(), layer.config.k, q])
}

/// Row indices of `M` member-major copies of a `rows`-row batch.
pub fn tile_indices(rows: usize, m: usize) -> Vec<usize> {
    (0..rows * m).map(|i| i % rows).collect()
}

/// `[X; X; …; X]` with `m` copies.
pub fn tile(x: &Tensor, m: usize) -> Tensor {
    let mut out = x.select_rows(&tile_indices(x.rows(), m));
    if x.shape().len() > 2 {
        let mut shape = x.shape().to_vec();
        shape[0] *= m;
        out = out.reshape(&shape).expect("tile preserves size");
    }
    out
}

/// The `m` member blocks of a tiled tensor.
pub fn split_members(x: &Tensor, m: usize) -> Result<Vec<Tensor>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if m == 0 || n % m != 0 {
        return dim_err(format!("{n} rows not divisible by {m} members"));
    }
    let b = n / m;
    let per = x.len() / n.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    (0..m).map(|i| Tensor::new(shape.clone(), x.data()[i * b * per..(i + 1) * b * per].to_vec())).collect()
}

/// Inverse of [`tile`]: the member-0 block.
pub fn untile(x: &Tensor, m: usize) -> Result<Tensor> {
    Ok(split_members(x, m)?.swap_remove(0))
}

/// Rank-1 ensemble of a dense layer: shared `U` and per-member `r_m`, `s_m`
/// stored as rows of `r: [M×D]` and `s: [M×L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEnsembleDense {
    pub u: Tensor,
    pub r: Tensor,
    pub s: Tensor,
}

impl BatchEnsembleDense {
    pub fn members(&self) -> usize {
        self.r.rows()
    }

    /// `U ∘ (r_m s_mᵀ)`, for oracles and the expert view.
    pub fn materialize(&self, m: usize) -> Tensor {
        let (d, l) = (self.u.rows(), self.u.cols());
        let (r, s) = (self.r.row(m), self.s.row(m));
        Tensor::from_fn(&[d, l], |i| self.u.data()[i] * r[i / l] * s[i % l])
    }
}

/// `((h ∘ r_m) U) ∘ s_m` for member-major tiled `h`.
pub fn be_graph(g: &mut Graph, h: Var, u: Var, r: Var, s: Var) -> Result<Var> {
    let m = g.value(r).rows();
    let n = g.value(h).rows();
    if m == 0 || n % m != 0 || g.value(s).rows() != m {
        return config_err(format!("{n} tiled rows for {m} ensemble members"));
    }
    let b = n / m;
    let rr = g.repeat_rows(r, b);
    let hr = g.mul(h, rr)?;
    let y = g.matmul(hr, u)?;
    let sr = g.repeat_rows(s, b);
    g.mul(y, sr)
}

pub fn be_dense_forward(h_tiled: &Tensor, be: &BatchEnsembleDense) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.constant(h_tiled.clone());
    let u = g.constant(be.u.clone());
    let r = g.constant(be.r.clone());
    let s = g.constant(be.s.clone());
    let out = be_graph(&mut g, h, u, r, s)?;
    Ok(g.value(out).clone())
}

/// A batch-ensemble layer read as a sparse layer with `M` experts and binary
/// gates that depend only on the row's position in the tiled batch.
#[derive(Debug, Clone)]
pub struct BeMoeView {
    pub experts: Vec<Tensor>,
}

pub fn be_as_moe_view(be: &BatchEnsembleDense) -> BeMoeView {
    BeMoeView { experts: (0..be.members()).map(|m| be.materialize(m)).collect() }
}

impl BeMoeView {
    pub fn experts(&self) -> usize {
        self.experts.len()
    }

    /// `[N×M]` gates: row `i` is one-hot at its member.
    pub fn gates(&self, rows: usize) -> Result<Tensor> {
        let m = self.experts.len();
        if m == 0 || rows % m != 0 {
            return dim_err("rows not divisible by members");
        }
        let b = rows / m;
        Ok(Tensor::from_fn(&[rows, m], |i| if i % m == (i / m) / b { 1.0 } else { 0.0 }))
    }

    pub fn forward(&self, h_tiled: &Tensor) -> Result<Tensor> {
        let gates = self.gates(h_tiled.rows())?;
        let l = self.experts[0].cols();
        let mut out = Tensor::zeros(&[h_tiled.rows(), l]);
        for (e, w) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..h_tiled.rows()).filter(|&i| gates.get2(i, e) != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let y = matmul(&h_tiled.select_rows(&rows), w)?;
            for (k, &i) in rows.iter().enumerate() {
                let gv = gates.get2(i, e);
                for (o, v) in out.row_mut(i).iter_mut().zip(y.row(k)) {
                    *o += gv * v;
                }
            }
        }
        Ok(out)
    }
}
