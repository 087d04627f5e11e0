//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use moe_ensemble::losses::{data_loss_graph, total_loss_graph, LossMode};
use moe_ensemble::model::{ForwardOptions, Model, ModelSpec, ParamVars, Variant};
use moe_ensemble::moe_layers::{moe_graph, ExpertMLP, ExpertVars, InitScheme, MoELayer, MoeConfig, MoeMode};
use moe_ensemble::numerics::{finite_difference_check, Graph, Rng, Tensor, Var};
use moe_ensemble::routing::{gate_k, NoiseConfig, Phase, RouterParams};
use moe_ensemble::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// A random gating problem with `E ≤ 16`, `K ≤ E`.
#[derive(Debug, Clone)]
pub struct GateCase {
    pub h: Tensor,
    pub w: Tensor,
    pub k: usize,
    pub sigma: f64,
    pub noise_seed: u64,
}

pub fn gate_case(rng: &mut Rng, with_noise: bool) -> GateCase {
    let e = 1 + rng.index(16);
    let k = 1 + rng.index(e);
    let d = 1 + rng.index(6);
    let n = 1 + rng.index(5);
    let h = rng.gaussian(&[n, d]);
    let w = rng.gaussian(&[e, d]);
    let sigma = if with_noise { 0.1 + rng.uniform(&[1]).data()[0] } else { 0.0 };
    GateCase { h, w, k, sigma, noise_seed: rng.index(1 << 30) as u64 }
}

/// Brute force: logits by explicit dot products, softmax by hand, then `K`
/// rounds of picking the largest remaining entry (lowest index on ties).
pub fn oracle_gate(c: &GateCase) -> (Vec<usize>, Vec<f64>) {
    let (n, d) = (c.h.rows(), c.h.cols());
    let e = c.w.rows();
    let eps = (c.sigma != 0.0).then(|| Rng::new(c.noise_seed).gaussian(&[n, e]));
    let mut idx = Vec::new();
    let mut wts = Vec::new();
    for i in 0..n {
        let mut z: Vec<f64> = (0..e)
            .map(|j| (0..d).map(|t| c.h.get2(i, t) * c.w.get2(j, t)).sum::<f64>())
            .collect();
        if let Some(eps) = &eps {
            for (j, v) in z.iter_mut().enumerate() {
                *v += c.sigma * eps.get2(i, j);
            }
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        for v in &p {
            total += v;
        }
        for v in p.iter_mut() {
            *v /= total;
        }
        let mut taken = vec![false; e];
        for _ in 0..c.k {
            let mut best: Option<usize> = None;
            for j in 0..e {
                if !taken[j] && best.is_none_or(|b| p[j] > p[b]) {
                    best = Some(j);
                }
            }
            let b = best.expect("K ≤ E");
            taken[b] = true;
            idx.push(b);
            wts.push(p[b]);
        }
    }
    (idx, wts)
}

/// `gate_k` on the case, with the noise drawn from `Rng::new(noise_seed)`.
pub fn run_gate_k(c: &GateCase) -> (Vec<usize>, Vec<f64>) {
    let noise = NoiseConfig { sigma: Some(c.sigma), multiplier: 1.0, eval_noise_enabled: false };
    let router = RouterParams::single(c.w.clone()).with_noise(noise);
    let phase = if c.sigma != 0.0 { Phase::Train } else { Phase::Eval };
    let d = gate_k(&c.h, &router, c.k, &mut Rng::new(c.noise_seed), phase).expect("valid case");
    (d.indices, d.weights)
}

/// Weighted sum against a fixed random tensor, so every output entry gets its own cotangent.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed).gaussian(g.value(y).shape());
    let c = g.constant(w);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Largest relative error over all parameters.
pub fn max_grad_error<F>(params: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check(f, params, FD_STEP, FD_TOL)
        .expect("gradient check runs")
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max)
}

pub fn expert_params(e: &ExpertMLP) -> [Tensor; 4] {
    [e.w1.clone(), e.b1.clone(), e.w2.clone(), e.b2.clone()]
}

/// Flattens `[h, routers.., experts..]` so every one of them is checked.
pub fn layer_params(h: &Tensor, l: &MoELayer) -> Vec<Tensor> {
    let mut ps = vec![h.clone()];
    ps.extend(l.router.w.iter().cloned());
    for e in &l.experts {
        ps.extend(expert_params(e));
    }
    ps
}

pub fn layer_fd(l: &MoELayer, h: &Tensor, seed: u64) -> f64 {
    let routers = l.router.w.len();
    let experts = l.experts.len();
    let mut cfg = l.config;
    cfg.noise = l.router.noise;
    max_grad_error(&layer_params(h, l), |g: &mut Graph, v: &[Var]| {
        let r = &v[1..1 + routers];
        let ev: Vec<ExpertVars> = (0..experts)
            .map(|e| {
                let b = 1 + routers + 4 * e;
                ExpertVars { w1: v[b], b1: v[b + 1], w2: v[b + 2], b2: v[b + 3] }
            })
            .collect();
        let out = moe_graph(g, v[0], &ev, r, &cfg, &Rng::new(seed), Phase::Train, false)?;
        probe(g, out.out, seed + 1)
    })
}

pub fn fd_layer(seed: u64, experts: usize, members: usize, k: usize, mode: MoeMode) -> MoELayer {
    let mut rng = Rng::new(seed);
    let cfg = MoeConfig { dropout_rate: 0.0, ..MoeConfig::new(k, mode) };
    let mut l = MoELayer::init(4, 6, experts, members, cfg, &mut rng).unwrap();
    // Larger weights keep the test away from the flat region where all routes tie.
    for w in l.router.w.iter_mut() {
        *w = w.scale(20.0);
    }
    for e in l.experts.iter_mut() {
        *e = ExpertMLP::init_with(4, 6, 4, InitScheme::Lecun, &mut rng);
        e.b1 = rng.gaussian(&[6]).scale(0.1);
        e.b2 = rng.gaussian(&[4]).scale(0.1);
    }
    l
}

pub fn small_spec(variant: Variant, m: usize) -> ModelSpec {
    let mut s = ModelSpec::tiny(variant, 3);
    s.image_size = 4;
    s.patch_size = 2;
    s.hidden = 8;
    s.mlp_dim = 8;
    s.layers = 2;
    s.last_n = 1;
    s.k = 2;
    s.m = m;
    s.expert_dropout = 0.0;
    s
}

/// FD of the full training objective with routing noise frozen by a fixed rng.
pub fn objective_error(model: &Model, mode: LossMode, aux_weight: f64) -> f64 {
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let x = Rng::new(3).gaussian(&[3, 4, 4, 3]);
    let members = model.spec.output_members();
    let labels: Vec<Vec<usize>> = (0..members).map(|m| (0..3).map(|i| (i + m) % 3).collect()).collect();
    let opts = ForwardOptions { dropout: false, ..ForwardOptions::train() };
    max_grad_error(&params, |g, v| {
        let pv: ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
        let out = model.graph_forward(g, &pv, &x, &Rng::new(4), opts)?;
        let data = data_loss_graph(g, &out.member_logits, &labels, mode)?;
        let (total, aux) = total_loss_graph(g, data, &out.sparse, aux_weight)?;
        assert_eq!(aux.is_some(), !out.sparse.is_empty());
        Ok(total)
    })
}
