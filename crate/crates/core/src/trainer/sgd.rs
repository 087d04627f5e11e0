//! SGD with heavy-ball momentum, global-norm clipping and learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
    WarmupCosine,
}

/// Learning rate at `step` (0-based) of `steps`. Warmup ramps linearly over the
/// first `warmup_fraction·steps` steps; `cosine` ignores the warmup.
pub fn learning_rate(schedule: LrSchedule, base: f64, step: usize, steps: usize, warmup_fraction: f64) -> f64 {
    let warm = match schedule {
        LrSchedule::Cosine => 0,
        _ => (warmup_fraction * steps as f64).round() as usize,
    };
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine | LrSchedule::WarmupCosine => {
            let span = (steps - warm).max(1) as f64;
            let t = (step - warm) as f64 / span;
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Velocity per parameter, created on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: IndexMap<String, Tensor>,
}

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &IndexMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Clips the global gradient norm to `clip_norm`, then `v ← βv + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    clip_norm: f64,
) -> Result<StepInfo> {
    let norm = global_norm(grads);
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        if g.shape() != p.shape() {
            return dim_err(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()));
        }
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + scale * gv;
            *pv -= lr * *vv;
        }
    }
    Ok(StepInfo { grad_norm: norm, clipped_norm: norm * scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f64>) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        m.insert(name.to_string(), Tensor::vector(v));
        m
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut st = SgdState::default();
        sgd_step(&mut p, &one("w", vec![0.1, -0.2]), &mut st, 1.0, 0.0, 10.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.9, 2.2]);
    }

    #[test]
    fn clipping_halves_norm_twenty() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![0.0, 0.0]));
        let mut st = SgdState::default();
        let info = sgd_step(&mut p, &one("w", vec![12.0, 16.0]), &mut st, 1.0, 0.0, 10.0).unwrap();
        assert_eq!(info.grad_norm, 20.0);
        assert_eq!(p.get("w").unwrap().data(), &[-6.0, -8.0]);
    }

    #[test]
    fn zero_gradients_decay_velocity() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        let mut st = SgdState::default();
        st.velocity.insert("w".into(), Tensor::vector(vec![2.0]));
        sgd_step(&mut p, &one("w", vec![0.0]), &mut st, 0.0, 0.9, 10.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
        assert!((st.velocity["w"].data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn schedules() {
        assert_eq!(learning_rate(LrSchedule::Constant, 0.1, 50, 100, 0.1), 0.1);
        assert!((learning_rate(LrSchedule::Constant, 0.1, 0, 100, 0.1) - 0.01).abs() < 1e-15);
        assert!((learning_rate(LrSchedule::Cosine, 1.0, 0, 100, 0.1) - 1.0).abs() < 1e-15);
        assert!(learning_rate(LrSchedule::WarmupCosine, 1.0, 99, 100, 0.1) < 0.01);
    }
}
