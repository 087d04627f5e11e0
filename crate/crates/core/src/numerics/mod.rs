//! Dense tensors, reverse-mode gradients and seeded randomness.

mod graph;
mod rng;
mod tensor;

pub use graph::{normal_cdf, Gradients, Graph, Var};
pub use rng::{gaussian_noise, Rng};
pub use tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};

use crate::error::{dim_err, Error, Result};

/// `input · weight (+ bias)` on plain tensors.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul(input, weight)?;
    if let Some(b) = bias {
        let c = out.cols();
        if b.len() != c {
            return dim_err(format!("bias of length {} for {c} outputs", b.len()));
        }
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    Ok(out)
}

/// Graph form of [`dense_forward`].
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    softmax_rows(logits)
}

/// Per-parameter outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that entries whose true gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares the tape's gradients of `f` with central differences.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar node. It is re-run for every perturbed entry, so any randomness it
/// uses has to be fixed by the caller.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("objective is {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        let mut worst: f64 = 0.0;
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        reports.push(GradCheck { param: pi, max_rel_error: worst, passed: worst < tolerance });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let w = Tensor::from_rows(&[vec![3.0, 4.0], vec![6.0, 8.0]]);
        assert_eq!(dense_forward(&x, &w, None).unwrap().data(), &[9.0, 12.0]);
        let b = Tensor::vector(vec![0.5, -1.0]);
        let z = dense_forward(&x, &Tensor::zeros(&[2, 2]), Some(&b)).unwrap();
        assert_eq!(z.data(), &[0.5, -1.0]);
        assert!(dense_forward(&x, &Tensor::zeros(&[3, 2]), None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::from_rows(&[vec![2.0, 1.0, 0.0]])).unwrap();
        for (a, b) in s.data().iter().zip([0.66524, 0.24473, 0.09003]) {
            assert!((a - b).abs() < 1e-4);
        }
        let one = softmax(&Tensor::from_rows(&[vec![-37.5]])).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = vec![Tensor::vector(vec![1.0, 2.0])];
        let rep = finite_difference_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &p,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep[0].passed && rep[0].max_rel_error == 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let p = vec![Tensor::vector(vec![-1.0])];
        let r = finite_difference_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &p,
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
