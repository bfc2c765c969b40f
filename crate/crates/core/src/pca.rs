//! Principal components by power iteration with deflation.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit components, strongest first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

const MAX_ITERS: usize = 10_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Sample covariance (divided by `n - 1`) of the rows of `x`.
pub fn covariance(x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.at(r, c)).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let a = row[i] - mean[i];
            for j in i..d {
                cov[i][j] += a * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

/// Top `k` components of the centered rows of `x`. Each component is iterated
/// until successive iterates differ by less than `tol` (max-norm).
pub fn fit(x: &Tensor, k: usize, tol: f64) -> Result<Pca> {
    if x.shape().len() != 2 || x.rows() < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got shape {:?}", x.shape())));
    }
    let d = x.cols();
    let k = k.min(d);
    let (mean, mut cov) = covariance(x);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for c in 0..k {
        // Deterministic start that is not orthogonal to a generic eigenvector.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i + c) % 7) as f64).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
            lambda = normalize(&mut w);
            if lambda == 0.0 {
                break;
            }
            fix_sign(&mut w);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if delta < tol {
                break;
            }
        }
        if lambda == 0.0 {
            // Remaining variance is zero; any orthonormal completion will do.
            v = (0..d).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
            for prev in &components {
                let p = dot(&v, prev);
                v.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
            normalize(&mut v);
        }
        fix_sign(&mut v);
        let rayleigh = dot(&v, &cov.iter().map(|row| dot(row, &v)).collect::<Vec<_>>());
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= rayleigh * v[i] * v[j];
            }
        }
        eigenvalues.push(rayleigh.max(0.0));
        components.push(v);
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

impl Pca {
    /// Rows of `x` projected onto the components, `[n, k]`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("pca_project", format!("{} columns, fitted on {}", x.cols(), self.mean.len())));
        }
        let mut data = Vec::with_capacity(x.rows() * self.components.len());
        for r in 0..x.rows() {
            let centered: Vec<f64> = x.row(r).iter().zip(&self.mean).map(|(a, m)| a - m).collect();
            data.extend(self.components.iter().map(|c| dot(&centered, c)));
        }
        Tensor::new(vec![x.rows(), self.components.len()], data)
    }
}
