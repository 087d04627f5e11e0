//! Tiny vision transformer with sparse, partitioned, multi-head and rank-1
//! ensemble variants.
//!
//! Parameters live in a flat [`ParamStore`] keyed by dot paths such as
//! `blocks.3.moe.experts.1.w1`. A forward pass is recorded on a [`Graph`] so the
//! same code serves evaluation, training and gradient checks.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::moe_layers::{be_graph, moe_graph, tile_indices, trunc_normal, ExpertVars, InitScheme, MoeConfig, MoeMode, INIT_STD};
use crate::numerics::{dense, Graph, Rng, Tensor, Var};
use crate::routing::{BlockLogits, CapacityConfig, NoiseConfig, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vit,
    Vmoe,
    Pbe,
    OnlyTiling,
    OnlyPartitioning,
    Multihead,
    Be,
    Mimo,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::Vmoe => "vmoe",
            Variant::Pbe => "pbe",
            Variant::OnlyTiling => "only_tiling",
            Variant::OnlyPartitioning => "only_partitioning",
            Variant::Multihead => "multihead",
            Variant::Be => "be",
            Variant::Mimo => "mimo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Where the last-n special blocks sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every other block counting back from the last one.
    #[default]
    Alternating,
    /// The last n blocks.
    Contiguous,
}

/// Initialisation of the rank-1 factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BeInit {
    #[default]
    RandomSign,
    /// `N(1, 0.5²)`.
    Gaussian,
}

fn d_two() -> usize {
    2
}
fn d_one() -> usize {
    1
}
fn d_three() -> usize {
    3
}
fn d_expert_dropout() -> f64 {
    0.1
}
fn d_multiplier() -> f64 {
    1.0
}
fn d_rep_prob() -> f64 {
    0.5
}
fn d_mimo_base() -> Variant {
    Variant::Vmoe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "d_three")]
    pub channels: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    #[serde(default = "d_one")]
    pub experts: usize,
    #[serde(default = "d_one")]
    pub k: usize,
    #[serde(default = "d_one")]
    pub m: usize,
    #[serde(default = "d_two")]
    pub last_n: usize,
    pub variant: Variant,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default = "d_rep_prob")]
    pub mimo_input_repetition_prob: f64,
    #[serde(default = "d_one")]
    pub batch_repetitions: usize,
    /// Sparse core of a MIMO model, `vit` or `vmoe`.
    #[serde(default = "d_mimo_base")]
    pub mimo_base: Variant,
    #[serde(default = "d_expert_dropout")]
    pub expert_dropout: f64,
    #[serde(default)]
    pub mlp_dropout: f64,
    /// Router noise σ; `1/E` when absent.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default = "d_multiplier")]
    pub noise_multiplier: f64,
    /// Routing noise at evaluation; defaults to on for `only_tiling` only.
    #[serde(default)]
    pub eval_noise: Option<bool>,
    #[serde(default)]
    pub capacity_train: CapacityConfig,
    #[serde(default)]
    pub capacity_eval: CapacityConfig,
    #[serde(default)]
    pub be_init: BeInit,
    #[serde(default)]
    pub init: InitScheme,
}

/// Kind of the feed-forward half of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    Sparse(MoeMode),
    BatchEnsemble,
}

impl ModelSpec {
    /// The desk-scale preset every trend is measured on.
    pub fn tiny(variant: Variant, classes: usize) -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            hidden: 32,
            mlp_dim: 64,
            layers: 4,
            heads: 2,
            classes,
            experts: 4,
            k: 1,
            m: 1,
            last_n: 2,
            variant,
            placement: Placement::Alternating,
            mimo_input_repetition_prob: 0.5,
            batch_repetitions: 1,
            mimo_base: Variant::Vmoe,
            expert_dropout: 0.1,
            mlp_dropout: 0.0,
            noise_sigma: None,
            noise_multiplier: 1.0,
            eval_noise: None,
            capacity_train: CapacityConfig::Unbounded,
            capacity_eval: CapacityConfig::Unbounded,
            be_init: BeInit::RandomSign,
            init: InitScheme::Small,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_experts(mut self, e: usize) -> Self {
        self.experts = e;
        self
    }

    /// Paper-scale shapes (`S/32`, `B/32`, `B/16`, `L/32`, `L/16`, `H/14`) at
    /// 384px, 1000 classes and 32 experts; used by the cost model only.
    pub fn preset(name: &str) -> Result<Self> {
        let (size, patch) = name.split_once('/').ok_or_else(|| Error::Config(format!("bad preset `{name}`")))?;
        let patch: usize = patch.parse().map_err(|_| Error::Config(format!("bad patch in `{name}`")))?;
        let (hidden, mlp, layers) = match size {
            "S" => (512, 2048, 8),
            "B" => (768, 3072, 12),
            "L" => (1024, 4096, 24),
            "H" => (1280, 5144, 32),
            _ => return config_err(format!("unknown preset size `{size}`")),
        };
        if !matches!((size, patch), ("S", 32) | ("B", 32) | ("B", 16) | ("L", 32) | ("L", 16) | ("H", 14)) {
            return config_err(format!("unknown preset `{name}`"));
        }
        let mut s = Self::tiny(Variant::Vit, 1000);
        s.image_size = 384;
        s.patch_size = patch;
        s.hidden = hidden;
        s.mlp_dim = mlp;
        s.layers = layers;
        s.heads = hidden / 64;
        s.experts = 32;
        s.last_n = if size == "H" { 5 } else { 2 };
        Ok(s)
    }

    pub fn patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    /// Channels of one network input (`channels·M` for MIMO).
    pub fn input_channels(&self) -> usize {
        if self.variant == Variant::Mimo {
            self.channels * self.m
        } else {
            self.channels
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.input_channels()
    }

    /// Copies produced by tiling (1 when the variant does not tile).
    pub fn tiles(&self) -> usize {
        match self.variant {
            Variant::Pbe | Variant::OnlyTiling | Variant::Be => self.m,
            _ => 1,
        }
    }

    /// Number of member predictions per example.
    pub fn output_members(&self) -> usize {
        match self.variant {
            Variant::Pbe | Variant::OnlyTiling | Variant::Be | Variant::Mimo => self.m,
            Variant::Multihead => self.k,
            _ => 1,
        }
    }

    /// Router blocks per sparse layer.
    pub fn router_blocks(&self) -> usize {
        match self.variant {
            Variant::Pbe | Variant::OnlyPartitioning => self.m,
            _ => 1,
        }
    }

    pub fn eval_noise_enabled(&self) -> bool {
        self.eval_noise.unwrap_or(self.variant == Variant::OnlyTiling)
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig { sigma: self.noise_sigma, multiplier: self.noise_multiplier, eval_noise_enabled: self.eval_noise_enabled() }
    }

    pub fn moe_config(&self, mode: MoeMode, phase: Phase) -> MoeConfig {
        MoeConfig {
            k: self.k,
            mode,
            capacity: if phase == Phase::Train { self.capacity_train } else { self.capacity_eval },
            dropout_rate: self.expert_dropout,
            noise: self.noise(),
        }
    }

    /// 0-indexed positions of the last-n special blocks, ascending.
    pub fn special_positions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = match self.placement {
            Placement::Alternating => (0..self.last_n).map(|i| self.layers - 1 - 2 * i).collect(),
            Placement::Contiguous => (0..self.last_n).map(|i| self.layers - 1 - i).collect(),
        };
        v.sort_unstable();
        v
    }

    fn is_sparse(&self) -> bool {
        match self.variant {
            Variant::Vit | Variant::Be => false,
            Variant::Mimo => self.mimo_base == Variant::Vmoe,
            _ => true,
        }
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        let mut kinds = vec![BlockKind::Dense; self.layers];
        let pos = self.special_positions();
        let last = pos.last().copied();
        for &p in &pos {
            kinds[p] = match self.variant {
                Variant::Vit => BlockKind::Dense,
                Variant::Be => BlockKind::BatchEnsemble,
                Variant::Vmoe | Variant::Mimo => {
                    if self.is_sparse() {
                        BlockKind::Sparse(MoeMode::Moe)
                    } else {
                        BlockKind::Dense
                    }
                }
                Variant::Pbe => BlockKind::Sparse(MoeMode::Pbe),
                Variant::OnlyTiling => BlockKind::Sparse(MoeMode::OnlyTiling),
                Variant::OnlyPartitioning => BlockKind::Sparse(MoeMode::OnlyPartitioning),
                Variant::Multihead => {
                    if Some(p) == last {
                        BlockKind::Sparse(MoeMode::Multihead)
                    } else {
                        BlockKind::Sparse(MoeMode::Moe)
                    }
                }
            };
        }
        kinds
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, what: &str| if v == 0 { config_err(format!("{what} must be positive")) } else { Ok(()) };
        pos(self.image_size, "image_size")?;
        pos(self.patch_size, "patch_size")?;
        pos(self.channels, "channels")?;
        pos(self.hidden, "hidden")?;
        pos(self.mlp_dim, "mlp_dim")?;
        pos(self.layers, "layers")?;
        pos(self.heads, "heads")?;
        pos(self.classes, "classes")?;
        pos(self.experts, "experts")?;
        pos(self.k, "k")?;
        pos(self.m, "m")?;
        pos(self.batch_repetitions, "batch_repetitions")?;
        if self.patch_size > self.image_size {
            return config_err(format!("patch_size {} exceeds image_size {}", self.patch_size, self.image_size));
        }
        if self.hidden % self.heads != 0 {
            return config_err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.last_n > self.layers {
            return config_err(format!("last_n {} exceeds layers {}", self.last_n, self.layers));
        }
        if self.placement == Placement::Alternating && self.last_n > 0 && 2 * self.last_n - 1 > self.layers {
            return config_err(format!("{} alternating blocks do not fit in {} layers", self.last_n, self.layers));
        }
        if !(0.0..1.0).contains(&self.expert_dropout) || !(0.0..1.0).contains(&self.mlp_dropout) {
            return config_err("dropout rates must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mimo_input_repetition_prob) {
            return config_err("mimo_input_repetition_prob must lie in [0, 1]");
        }
        if self.variant == Variant::Mimo && !matches!(self.mimo_base, Variant::Vit | Variant::Vmoe) {
            return config_err("mimo_base must be vit or vmoe");
        }
        if self.noise_sigma.is_some_and(|s| s < 0.0) || self.noise_multiplier < 0.0 {
            return config_err("noise scale must be nonnegative");
        }
        if matches!(self.variant, Variant::Vit | Variant::Vmoe | Variant::Multihead) && self.m != 1 {
            return config_err(format!("{} has no ensemble axis; use m = 1", self.variant.name()));
        }
        if self.is_sparse() && self.last_n > 0 {
            let blocks = self.router_blocks();
            if self.experts % blocks != 0 {
                return config_err(format!("E={} not divisible by M={}", self.experts, blocks));
            }
            if self.k > self.experts / blocks {
                return config_err(format!("K={} exceeds {} experts per router", self.k, self.experts / blocks));
            }
        }
        if self.variant == Variant::Multihead && self.last_n == 0 {
            return config_err("multihead needs at least one sparse block");
        }
        Ok(())
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape, trainable or constant.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }))
            .collect();
        ParamVars { map }
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { map: iter.into_iter().collect() }
    }
}

/// Member and ensemble predictive distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    /// `[M×B×C]`.
    pub member_probs: Tensor,
    /// `[B×C]`, the mean over members.
    pub ensemble_probs: Tensor,
}

impl PredictionBundle {
    pub fn from_members(members: &[Tensor]) -> Result<Self> {
        let Some(first) = members.first() else {
            return dim_err("prediction bundle without members");
        };
        let (b, c) = (first.rows(), first.cols());
        if members.iter().any(|p| p.rows() != b || p.cols() != c) {
            return dim_err("member predictions disagree in shape");
        }
        let mut sum = Tensor::zeros(&[b, c]);
        let mut data = Vec::with_capacity(members.len() * b * c);
        for p in members {
            sum.add_assign(p)?;
            data.extend_from_slice(p.data());
        }
        let ensemble = sum.scale(1.0 / members.len() as f64);
        Ok(Self { member_probs: Tensor::new(vec![members.len(), b, c], data)?, ensemble_probs: ensemble })
    }

    pub fn members(&self) -> usize {
        self.member_probs.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.ensemble_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.ensemble_probs.cols()
    }

    /// Member `m` as a `[B×C]` matrix.
    pub fn member(&self, m: usize) -> Tensor {
        let (b, c) = (self.batch(), self.classes());
        Tensor::new(vec![b, c], self.member_probs.data()[m * b * c..(m + 1) * b * c].to_vec()).expect("member slice")
    }
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub phase: Phase,
    pub dropout: bool,
    /// Tile at the input instead of at the first ensemble block.
    pub naive_tiling: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { phase: Phase::Train, dropout: true, naive_tiling: false }
    }

    pub fn eval() -> Self {
        Self { phase: Phase::Eval, dropout: false, naive_tiling: false }
    }
}

/// Router state of one sparse layer, for the auxiliary losses.
#[derive(Debug, Clone)]
pub struct SparseAux {
    pub block: usize,
    pub routers: Vec<BlockLogits>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// One `[B×C]` logit matrix per member.
    pub member_logits: Vec<Var>,
    /// Normalized class-token representation `[B×D]` feeding each member's logits.
    pub member_features: Vec<Var>,
    pub sparse: Vec<SparseAux>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

const DENSE_DROPOUT_TAG: u64 = 1 << 20;

fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

fn be_factor(spec: &ModelSpec, rng: &mut Rng, shape: &[usize]) -> Tensor {
    match spec.be_init {
        BeInit::RandomSign => rng.uniform(shape).map(|u| if u < 0.5 { -1.0 } else { 1.0 }),
        BeInit::Gaussian => rng.gaussian(shape).map(|z| 1.0 + 0.5 * z),
    }
}

/// Fresh parameters for `spec`.
pub fn build_model(spec: &ModelSpec, rng: &mut Rng) -> Result<Model> {
    spec.validate()?;
    let (d, f) = (spec.hidden, spec.mlp_dim);
    let mut p = ParamStore::new();
    p.insert("embed.w", spec.init.kernel(rng, &[spec.patch_dim(), d]));
    p.insert("embed.b", Tensor::zeros(&[d]));
    p.insert("cls", trunc_normal(rng, &[1, d], INIT_STD));
    p.insert("pos", trunc_normal(rng, &[spec.tokens(), d], INIT_STD));
    for (i, kind) in spec.block_kinds().into_iter().enumerate() {
        let b = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}.{ln}.g"), Tensor::ones(&[d]));
            p.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("{b}.attn.w{w}"), spec.init.kernel(rng, &[d, d]));
            p.insert(format!("{b}.attn.b{w}"), Tensor::zeros(&[d]));
        }
        match kind {
            BlockKind::Dense | BlockKind::BatchEnsemble => {
                p.insert(format!("{b}.mlp.w1"), spec.init.kernel(rng, &[d, f]));
                p.insert(format!("{b}.mlp.b1"), Tensor::zeros(&[f]));
                p.insert(format!("{b}.mlp.w2"), spec.init.kernel(rng, &[f, d]));
                p.insert(format!("{b}.mlp.b2"), Tensor::zeros(&[d]));
                if kind == BlockKind::BatchEnsemble {
                    let m = spec.m;
                    p.insert(format!("{b}.mlp.w1_r"), be_factor(spec, rng, &[m, d]));
                    p.insert(format!("{b}.mlp.w1_s"), be_factor(spec, rng, &[m, f]));
                    p.insert(format!("{b}.mlp.w2_r"), be_factor(spec, rng, &[m, f]));
                    p.insert(format!("{b}.mlp.w2_s"), be_factor(spec, rng, &[m, d]));
                }
            }
            BlockKind::Sparse(_) => {
                let blocks = spec.router_blocks();
                let per = spec.experts / blocks;
                if spec.router_blocks() == 1 {
                    p.insert(format!("{b}.moe.router"), spec.init.router(rng, per, d));
                } else {
                    for m in 0..blocks {
                        p.insert(format!("{b}.moe.router.{m}"), spec.init.router(rng, per, d));
                    }
                }
                for e in 0..spec.experts {
                    let ep = format!("{b}.moe.experts.{e}");
                    p.insert(format!("{ep}.w1"), spec.init.kernel(rng, &[d, f]));
                    p.insert(format!("{ep}.b1"), Tensor::zeros(&[f]));
                    p.insert(format!("{ep}.w2"), spec.init.kernel(rng, &[f, d]));
                    p.insert(format!("{ep}.b2"), Tensor::zeros(&[d]));
                }
            }
        }
    }
    p.insert("norm.g", Tensor::ones(&[d]));
    p.insert("norm.b", Tensor::zeros(&[d]));
    let outs = if spec.variant == Variant::Mimo { spec.classes * spec.m } else { spec.classes };
    p.insert("head.w", trunc_normal(rng, &[d, outs], INIT_STD));
    p.insert("head.b", Tensor::zeros(&[outs]));
    Ok(Model { spec: spec.clone(), params: p })
}

/// `[B, S, S, C]` images to `[B·P, p·p·C]` patch rows, patches row-major and
/// each patch flattened as `(dy, dx, c)`. A border narrower than one patch is dropped.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != s[2] || patch == 0 || s[1] < patch {
        return dim_err(format!("expected square [B, S, S, C] images of side at least {patch}, got {s:?}"));
    }
    let (b, side, c) = (s[0], s[1], s[3]);
    let per_side = side / patch;
    let pd = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(b * per_side * per_side * pd);
    for n in 0..b {
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((n * side + y) * side + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(vec![b * per_side * per_side, pd], out)
}

/// Stacks equally shaped `[B, S, S, C]` images along channels.
pub fn stack_channels(images: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return dim_err("nothing to stack");
    };
    let s = first.shape().to_vec();
    if s.len() != 4 || images.iter().any(|t| t.shape() != s.as_slice()) {
        return dim_err("stacked images must share a [B, S, S, C] shape");
    }
    let c = s[3];
    let pixels = s[0] * s[1] * s[2];
    let mut out = Vec::with_capacity(pixels * c * images.len());
    for px in 0..pixels {
        for t in images {
            out.extend_from_slice(&t.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![s[0], s[1], s[2], c * images.len()], out)
}

fn layer_norm(g: &mut Graph, x: Var, p: &ParamVars, name: &str) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?)
}

fn dropout_mask(rng: &Rng, rows: usize, cols: usize, rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    rng.clone().uniform(&[rows, cols]).map(|u| if u < keep { 1.0 / keep } else { 0.0 })
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass. `images` must carry `spec.input_channels()` channels.
    pub fn graph_forward(&self, g: &mut Graph, p: &ParamVars, images: &Tensor, rng: &Rng, opts: ForwardOptions) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let s = images.shape();
        if s.len() != 4 || s[1] != spec.image_size || s[2] != spec.image_size || s[3] != spec.input_channels() {
            return dim_err(format!(
                "images {s:?} do not match [B, {0}, {0}, {1}]",
                spec.image_size,
                spec.input_channels()
            ));
        }
        let b = s[0];
        let t = spec.tokens();
        let tiles = spec.tiles();
        let mut patches = patchify(images, spec.patch_size)?;
        let mut batches = b;
        let mut streams = 1;
        if opts.naive_tiling && tiles > 1 {
            patches = patches.select_rows(&tile_indices(patches.rows(), tiles));
            batches *= tiles;
            streams = tiles;
        }
        let pv = g.constant(patches);
        let emb = dense(g, pv, p.get("embed.w")?, Some(p.get("embed.b")?))?;
        let mut x = g.assemble_tokens(emb, p.get("cls")?, p.get("pos")?, batches)?;
        let mut sparse = Vec::new();

        for (i, kind) in spec.block_kinds().into_iter().enumerate() {
            let bp = block_prefix(i);
            let lr = rng.fork(i as u64);
            let y = layer_norm(g, x, p, &format!("{bp}.ln1"))?;
            let mut qkv = [y; 3];
            for (slot, w) in qkv.iter_mut().zip(["q", "k", "v"]) {
                *slot = dense(g, y, p.get(&format!("{bp}.attn.w{w}"))?, Some(p.get(&format!("{bp}.attn.b{w}"))?))?;
            }
            let a = g.attention(qkv[0], qkv[1], qkv[2], batches, t, spec.heads)?;
            let a = dense(g, a, p.get(&format!("{bp}.attn.wo"))?, Some(p.get(&format!("{bp}.attn.bo"))?))?;
            x = g.add(x, a)?;

            let ensemble_block = matches!(kind, BlockKind::BatchEnsemble | BlockKind::Sparse(MoeMode::Pbe | MoeMode::OnlyTiling));
            if ensemble_block && streams == 1 && tiles > 1 {
                let rows = g.value(x).rows();
                x = g.gather_rows(x, tile_indices(rows, tiles))?;
                batches *= tiles;
                streams = tiles;
            }
            let rows = g.value(x).rows();
            let y = layer_norm(g, x, p, &format!("{bp}.ln2"))?;
            let mlp_out = match kind {
                BlockKind::Dense | BlockKind::BatchEnsemble => {
                    let mp = format!("{bp}.mlp");
                    let h1 = if kind == BlockKind::BatchEnsemble {
                        let z = be_graph(g, y, p.get(&format!("{mp}.w1"))?, p.get(&format!("{mp}.w1_r"))?, p.get(&format!("{mp}.w1_s"))?)?;
                        g.add_bias(z, p.get(&format!("{mp}.b1"))?)?
                    } else {
                        dense(g, y, p.get(&format!("{mp}.w1"))?, Some(p.get(&format!("{mp}.b1"))?))?
                    };
                    let mut h1 = g.gelu(h1);
                    if opts.dropout && spec.mlp_dropout > 0.0 {
                        let mask = dropout_mask(&lr.fork(DENSE_DROPOUT_TAG), rows, spec.mlp_dim, spec.mlp_dropout);
                        h1 = g.mul_const(h1, mask)?;
                    }
                    if kind == BlockKind::BatchEnsemble {
                        let z = be_graph(g, h1, p.get(&format!("{mp}.w2"))?, p.get(&format!("{mp}.w2_r"))?, p.get(&format!("{mp}.w2_s"))?)?;
                        g.add_bias(z, p.get(&format!("{mp}.b2"))?)?
                    } else {
                        dense(g, h1, p.get(&format!("{mp}.w2"))?, Some(p.get(&format!("{mp}.b2"))?))?
                    }
                }
                BlockKind::Sparse(mode) => {
                    let ep = format!("{bp}.moe.experts");
                    let experts = (0..spec.experts)
                        .map(|e| {
                            Ok(ExpertVars {
                                w1: p.get(&format!("{ep}.{e}.w1"))?,
                                b1: p.get(&format!("{ep}.{e}.b1"))?,
                                w2: p.get(&format!("{ep}.{e}.w2"))?,
                                b2: p.get(&format!("{ep}.{e}.b2"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let routers = if spec.router_blocks() == 1 {
                        vec![p.get(&format!("{bp}.moe.router"))?]
                    } else {
                        (0..spec.router_blocks()).map(|m| p.get(&format!("{bp}.moe.router.{m}"))).collect::<Result<Vec<_>>>()?
                    };
                    let cfg = spec.moe_config(mode, opts.phase);
                    let out = moe_graph(g, y, &experts, &routers, &cfg, &lr, opts.phase, opts.dropout)?;
                    sparse.push(SparseAux { block: i, routers: out.gate.blocks });
                    if mode == MoeMode::Multihead {
                        // stream j carries the residual plus the j-th slot
                        let k = spec.k;
                        let hk = g.gather_rows(x, tile_indices(rows, k))?;
                        let perm: Vec<usize> = (0..k * rows).map(|idx| (idx % rows) * k + idx / rows).collect();
                        let slots = g.gather_rows(out.out, perm)?;
                        x = g.add(hk, slots)?;
                        batches *= k;
                        streams = k;
                        continue;
                    }
                    out.out
                }
            };
            x = g.add(x, mlp_out)?;
        }

        let y = layer_norm(g, x, p, "norm")?;
        let cls_rows: Vec<usize> = (0..batches).map(|i| i * t).collect();
        let cls = g.gather_rows(y, cls_rows)?;
        let logits = dense(g, cls, p.get("head.w")?, Some(p.get("head.b")?))?;
        let (member_logits, member_features) = if spec.variant == Variant::Mimo {
            let c = spec.classes;
            let lg = (0..spec.m).map(|m| g.select_cols(logits, m * c, c)).collect::<Result<Vec<_>>>()?;
            (lg, vec![cls; spec.m])
        } else if streams == 1 {
            (vec![logits], vec![cls])
        } else {
            let split = |g: &mut Graph, v: Var| (0..streams).map(|m| g.gather_rows(v, (m * b..(m + 1) * b).collect())).collect::<Result<Vec<_>>>();
            (split(g, logits)?, split(g, cls)?)
        };
        Ok(ForwardOutput { member_logits, member_features, sparse })
    }

    /// Single-image inputs to a MIMO model fill every slot with the same image.
    fn replicate_for_mimo(&self, images: &Tensor) -> Result<Option<Tensor>> {
        if self.spec.variant == Variant::Mimo && self.spec.m > 1 && images.shape().get(3) == Some(&self.spec.channels) {
            Ok(Some(stack_channels(&vec![images; self.spec.m])?))
        } else {
            Ok(None)
        }
    }

    /// Evaluation-style forward returning probabilities. MIMO models given
    /// single-image inputs see every slot filled with the same image.
    pub fn predict(&self, images: &Tensor, rng: &Rng, opts: ForwardOptions) -> Result<PredictionBundle> {
        let replicated = self.replicate_for_mimo(images)?;
        let input = replicated.as_ref().unwrap_or(images);
        let mut g = Graph::new();
        let p = self.params.to_graph(&mut g, false);
        let out = self.graph_forward(&mut g, &p, input, rng, opts)?;
        let mut members = Vec::with_capacity(out.member_logits.len());
        for v in out.member_logits {
            let probs = g.softmax(v)?;
            let pv = g.value(probs);
            pv.ensure_finite("member probabilities").map_err(|_| Error::Evaluation("non-finite activations".into()))?;
            members.push(pv.clone());
        }
        PredictionBundle::from_members(&members)
    }

    /// Per-member pre-head representations `[M×B×D]` at evaluation.
    pub fn features(&self, images: &Tensor, rng: &Rng) -> Result<Tensor> {
        let replicated = self.replicate_for_mimo(images)?;
        let input = replicated.as_ref().unwrap_or(images);
        let mut g = Graph::new();
        let p = self.params.to_graph(&mut g, false);
        let out = self.graph_forward(&mut g, &p, input, rng, ForwardOptions::eval())?;
        let parts: Vec<&Tensor> = out.member_features.iter().map(|&v| g.value(v)).collect();
        let (b, d) = (parts[0].rows(), parts[0].cols());
        let data = parts.iter().flat_map(|t| t.data().iter().cloned()).collect();
        Tensor::new(vec![parts.len(), b, d], data)
    }

    pub fn forward(&self, images: &Tensor, rng: &Rng, phase: Phase) -> Result<PredictionBundle> {
        let opts = ForwardOptions { phase, dropout: false, naive_tiling: false };
        self.predict(images, rng, opts)
    }
}

/// `samples` stochastic forwards with dropout on; sample `s` uses `rng.fork(s)`.
pub fn mc_dropout_predict(model: &Model, images: &Tensor, samples: usize, rng: &Rng) -> Result<PredictionBundle> {
    if samples == 0 {
        return config_err("mc_dropout_predict needs at least one sample");
    }
    let has_sparse = model.spec.block_kinds().iter().any(|k| matches!(k, BlockKind::Sparse(_)));
    if model.spec.mlp_dropout == 0.0 && !(has_sparse && model.spec.expert_dropout > 0.0) {
        log::warn!("MC dropout with dropout rate 0: every sample is identical");
    }
    let opts = ForwardOptions { phase: Phase::Eval, dropout: true, naive_tiling: false };
    let members = (0..samples)
        .map(|s| Ok(model.predict(images, &rng.fork(s as u64), opts)?.ensemble_probs))
        .collect::<Result<Vec<_>>>()?;
    PredictionBundle::from_members(&members)
}

/// Averages independently trained models; each contributes its own ensemble prediction.
pub fn deep_ensemble_predict(models: &[Model], images: &Tensor, rng: &Rng) -> Result<PredictionBundle> {
    let Some(first) = models.first() else {
        return config_err("deep ensemble without members");
    };
    if models.iter().any(|m| m.spec.classes != first.spec.classes) {
        return config_err("ensemble members disagree on class count");
    }
    let members = models.iter().map(|m| Ok(m.forward(images, rng, Phase::Eval)?.ensemble_probs)).collect::<Result<Vec<_>>>()?;
    PredictionBundle::from_members(&members)
}
