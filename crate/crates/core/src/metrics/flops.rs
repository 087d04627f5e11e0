//! Analytic FLOP counts.
//!
//! A matmul of `[m×k]·[k×n]` costs `2mkn`; bias, residual, layer-norm, GELU
//! and softmax add small per-element terms. Counts are per example.

use serde::Serialize;

use crate::error::Result;
use crate::model::{BlockKind, ModelSpec, Variant};
use crate::moe_layers::MoeMode;

const LN_PER_ELEM: u64 = 5;
const GELU_PER_ELEM: u64 = 8;
const SOFTMAX_PER_ELEM: u64 = 5;

/// Forward multiplier for one training step (forward plus a backward of about twice its cost).
pub const TRAIN_MULTIPLIER: u64 = 3;

fn dense(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n + m * n
}

fn ln(m: u64, d: u64) -> u64 {
    LN_PER_ELEM * m * d
}

fn mlp(t: u64, d: u64, f: u64) -> u64 {
    dense(t, d, f) + GELU_PER_ELEM * t * f + dense(t, f, d)
}

/// Per-example forward cost split at the tiling point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ForwardFlops {
    /// Work before the tiled part, executed once.
    pub shared: u64,
    /// Work of a single member after tiling.
    pub per_member: u64,
    /// Member copies carried after tiling.
    pub copies: u64,
}

impl ForwardFlops {
    pub fn deferred(&self) -> u64 {
        self.shared + self.copies * self.per_member
    }

    pub fn naive(&self) -> u64 {
        self.copies * (self.shared + self.per_member)
    }

    pub fn total(&self, deferred: bool) -> u64 {
        if deferred {
            self.deferred()
        } else {
            self.naive()
        }
    }

    /// `1 − deferred/naive`.
    pub fn tiling_saving(&self) -> f64 {
        1.0 - self.deferred() as f64 / self.naive() as f64
    }
}

/// Attention half of a block on `t` tokens.
pub fn attention_flops(t: u64, d: u64, heads: u64) -> u64 {
    ln(t, d) + 4 * dense(t, d, d) + 2 * t * t * d + SOFTMAX_PER_ELEM * heads * t * t + 2 * t * t * d + t * d
}

/// Feed-forward half of a block of the given kind, per member copy.
pub fn ffn_flops(spec: &ModelSpec, kind: BlockKind) -> u64 {
    let (t, d, f) = (spec.tokens() as u64, spec.hidden as u64, spec.mlp_dim as u64);
    let e = spec.experts as u64;
    let k = spec.k as u64;
    let blocks = spec.router_blocks() as u64;
    let body = match kind {
        BlockKind::Dense => mlp(t, d, f),
        // input and output scaling on both rank-1 layers
        BlockKind::BatchEnsemble => mlp(t, d, f) + 2 * t * (d + f),
        BlockKind::Sparse(mode) => {
            let (router_cols, experts_used) = match mode {
                MoeMode::Moe | MoeMode::OnlyTiling | MoeMode::Multihead => (e, k),
                MoeMode::Pbe => (e / blocks, k),
                MoeMode::OnlyPartitioning => (e, k * blocks),
            };
            dense(t, d, router_cols) + SOFTMAX_PER_ELEM * t * router_cols + experts_used * (mlp(t, d, f) + 2 * t * d)
        }
    };
    ln(t, d) + body + t * d
}

/// Patch embedding plus token assembly.
pub fn embed_flops(spec: &ModelSpec) -> u64 {
    let p = spec.patches() as u64;
    dense(p, spec.patch_dim() as u64, spec.hidden as u64) + spec.tokens() as u64 * spec.hidden as u64
}

/// Final norm and classifier on the class token.
pub fn head_flops(spec: &ModelSpec) -> u64 {
    let d = spec.hidden as u64;
    let outs = if spec.variant == Variant::Mimo { spec.classes * spec.m } else { spec.classes } as u64;
    ln(1, d) + dense(1, d, outs)
}

/// Per-example forward FLOPs of `spec`.
pub fn forward_flops(spec: &ModelSpec) -> Result<ForwardFlops> {
    spec.validate()?;
    let t = spec.tokens() as u64;
    let (d, h) = (spec.hidden as u64, spec.heads as u64);
    let kinds = spec.block_kinds();
    let tiles = spec.tiles() as u64;
    let first_tiled = kinds
        .iter()
        .position(|k| matches!(k, BlockKind::BatchEnsemble | BlockKind::Sparse(MoeMode::Pbe | MoeMode::OnlyTiling)))
        .filter(|_| tiles > 1);

    let mut shared = embed_flops(spec);
    let mut per_member = 0u64;
    let mut copies = 1u64;
    let mut tiled = false;
    for (i, &kind) in kinds.iter().enumerate() {
        let attn = attention_flops(t, d, h);
        if tiled {
            per_member += attn;
        } else {
            shared += attn;
        }
        if Some(i) == first_tiled {
            tiled = true;
            copies = tiles;
        }
        let ffn = ffn_flops(spec, kind);
        if tiled {
            per_member += ffn;
        } else {
            shared += ffn;
        }
        if kind == BlockKind::Sparse(MoeMode::Multihead) {
            // later work runs once per slot stream
            tiled = true;
            copies = spec.k as u64;
        }
    }
    if tiled {
        per_member += head_flops(spec);
    } else {
        shared += head_flops(spec);
    }
    if !tiled {
        // nothing is replicated: treat the whole network as one member
        return Ok(ForwardFlops { shared: 0, per_member: shared, copies: 1 });
    }
    Ok(ForwardFlops { shared, per_member, copies })
}

/// Training GFLOPs: `3 × forward × steps × batch`.
pub fn flops_estimate(spec: &ModelSpec, steps: u64, batch: u64, deferred_tiling: bool) -> Result<f64> {
    let fwd = forward_flops(spec)?.total(deferred_tiling);
    Ok((TRAIN_MULTIPLIER * fwd) as f64 * steps as f64 * batch as f64 / 1e9)
}

/// Cost of `members` independently run models.
pub fn ensemble_flops(single: f64, members: usize) -> f64 {
    single * members as f64
}

/// Forward GFLOPs per example.
pub fn forward_gflops(spec: &ModelSpec, deferred_tiling: bool) -> Result<f64> {
    Ok(forward_flops(spec)?.total(deferred_tiling) as f64 / 1e9)
}
