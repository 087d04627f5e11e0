//! Closed-form ridge probe on frozen representations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FewshotMode {
    /// One classifier on the concatenated member features.
    #[default]
    Joint,
    /// One classifier per member, predictions averaged.
    Disjoint,
}

/// Default regularizer for `s` feature dimensions.
pub fn default_ridge(s: usize) -> f64 {
    1e-3 * s as f64
}

/// Splits example indices into the first `shots` of every class and the rest.
pub fn shot_split(labels: &[usize], classes: usize, shots: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![0usize; classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return dim_err(format!("label {y} out of range for {classes} classes"));
        }
        if seen[y] < shots {
            seen[y] += 1;
            train.push(i);
        } else {
            test.push(i);
        }
    }
    if let Some(c) = seen.iter().position(|&n| n < shots) {
        return dim_err(format!("class {c} has fewer than {shots} examples"));
    }
    if test.is_empty() {
        return dim_err("no held-out examples left after the shot split");
    }
    Ok((train, test))
}

/// Design matrix with a trailing ones column.
fn design(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let s = rows[0].len();
    DMatrix::from_fn(rows.len(), s + 1, |i, j| if j < s { rows[i][j] } else { 1.0 })
}

/// Ridge weights `(XᵀX + λI)⁻¹XᵀY` with one-hot targets; the bias is left unpenalized.
fn fit(x: &DMatrix<f64>, labels: &[usize], classes: usize, lambda: f64) -> Result<DMatrix<f64>> {
    let y = DMatrix::from_fn(x.nrows(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    let mut gram = x.transpose() * x;
    let p = gram.nrows();
    for j in 0..p - 1 {
        gram[(j, j)] += lambda;
    }
    // a tiny jitter on the bias keeps the system positive definite
    gram[(p - 1, p - 1)] += 1e-12;
    let rhs = x.transpose() * y;
    let chol = gram.cholesky().ok_or_else(|| Error::Fit("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

fn member_rows(features: &Tensor, m: usize, idx: &[usize]) -> Vec<Vec<f64>> {
    let (n, s) = (features.shape()[1], features.shape()[2]);
    idx.iter().map(|&i| features.data()[(m * n + i) * s..(m * n + i + 1) * s].to_vec()).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Held-out error (%) of a linear probe trained on `shots` examples per class.
///
/// `features` is `[M, N, S]`. `lambda` defaults to `1e-3·S'`, where `S'` is
/// the probe's input width.
pub fn fewshot_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    shots: usize,
    mode: FewshotMode,
    lambda: Option<f64>,
) -> Result<f64> {
    if features.shape().len() != 3 || features.shape()[1] != labels.len() {
        return dim_err(format!("features {:?} do not match {} labels", features.shape(), labels.len()));
    }
    let members = features.shape()[0];
    let (train, test) = shot_split(labels, classes, shots)?;
    let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let scores: Vec<DVector<f64>> = match mode {
        FewshotMode::Joint => {
            let concat = |idx: &[usize]| -> Vec<Vec<f64>> {
                let per: Vec<_> = (0..members).map(|m| member_rows(features, m, idx)).collect();
                (0..idx.len()).map(|r| per.iter().flat_map(|p| p[r].iter().cloned()).collect()).collect()
            };
            let xtr = design(&concat(&train));
            let lam = lambda.unwrap_or_else(|| default_ridge(xtr.ncols() - 1));
            let w = fit(&xtr, &train_y, classes, lam)?;
            let pred = design(&concat(&test)) * w;
            (0..test.len()).map(|r| pred.row(r).transpose()).collect()
        }
        FewshotMode::Disjoint => {
            let mut acc = vec![DVector::zeros(classes); test.len()];
            for m in 0..members {
                let xtr = design(&member_rows(features, m, &train));
                let lam = lambda.unwrap_or_else(|| default_ridge(xtr.ncols() - 1));
                let w = fit(&xtr, &train_y, classes, lam)?;
                let pred = design(&member_rows(features, m, &test)) * w;
                for (r, a) in acc.iter_mut().enumerate() {
                    *a += pred.row(r).transpose();
                }
            }
            acc.into_iter().map(|a| a / members as f64).collect()
        }
    };
    let wrong = test.iter().zip(&scores).filter(|(&i, s)| argmax(s.as_slice()) != labels[i]).count();
    Ok(100.0 * wrong as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn blobs(n: usize, s: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let z = rng.gaussian(&[n, s]);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let f = Tensor::from_fn(&[1, n, s], |k| {
            let (i, j) = (k / s, k % s);
            z.get2(i, j) + if j == 0 { 4.0 * labels[i] as f64 - 2.0 } else { 0.0 }
        });
        (f, labels)
    }

    #[test]
    fn separable_blobs() {
        let (f, y) = blobs(400, 8, 1);
        let err = fewshot_probe(&f, &y, 2, 25, FewshotMode::Joint, None).unwrap();
        assert!(err < 5.0, "{err}");
    }

    #[test]
    fn single_member_modes_agree() {
        let (f, y) = blobs(200, 5, 2);
        let a = fewshot_probe(&f, &y, 2, 10, FewshotMode::Joint, None).unwrap();
        let b = fewshot_probe(&f, &y, 2, 10, FewshotMode::Disjoint, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_shots_is_an_error() {
        let (f, y) = blobs(10, 3, 3);
        assert!(fewshot_probe(&f, &y, 2, 6, FewshotMode::Joint, None).is_err());
    }
}
