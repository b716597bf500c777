//! Independent reference computations shared by the integration suites.

#![allow(dead_code)]

use mixlasso::grouplasso::DenseGram;
use mixlasso::{Dataset, MixtureParams};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// K positive definite Gram slices and moment slices of shape p × q.
pub fn random_mstep(seed: u64, p: usize, k: usize, q: usize) -> (DenseGram, Vec<DMatrix<f64>>) {
    let mut r = rng(seed);
    let grams = (0..k)
        .map(|_| {
            let a = DMatrix::from_fn(2 * p + 5, p, |_, _| r.sample::<f64, _>(StandardNormal));
            a.tr_mul(&a) / (2 * p + 5) as f64
        })
        .collect();
    let rho = (0..k)
        .map(|_| DMatrix::from_fn(p, q, |_, _| r.random_range(-1.0..1.0)))
        .collect();
    (DenseGram(grams), rho)
}

fn objective(gram: &DenseGram, rho: &[DMatrix<f64>], lambda: f64, beta: &[DMatrix<f64>]) -> f64 {
    let (p, q) = rho[0].shape();
    let mut f = 0.0;
    for k in 0..beta.len() {
        f += (beta[k].transpose() * &gram.0[k] * &beta[k]).trace() - 2.0 * (rho[k].transpose() * &beta[k]).trace();
    }
    for j in 0..p {
        for l in 0..q {
            f += lambda * beta.iter().map(|b| b[(j, l)].powi(2)).sum::<f64>().sqrt();
        }
    }
    f
}

/// Accelerated proximal gradient on the M-step objective. Returns the
/// minimiser and its objective value.
pub fn fista(gram: &DenseGram, rho: &[DMatrix<f64>], lambda: f64) -> (Vec<DMatrix<f64>>, f64) {
    let k = rho.len();
    let (p, q) = rho[0].shape();
    let lip = 2.0
        * gram
            .0
            .iter()
            .map(|g| SymmetricEigen::new(g.clone()).eigenvalues.max())
            .fold(0.0, f64::max);
    let step = 1.0 / lip;
    let mut x = vec![DMatrix::<f64>::zeros(p, q); k];
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..200_000 {
        let mut z: Vec<DMatrix<f64>> = (0..k)
            .map(|c| &y[c] - (&gram.0[c] * &y[c] - &rho[c]) * (2.0 * step))
            .collect();
        for j in 0..p {
            for l in 0..q {
                let norm = z.iter().map(|b| b[(j, l)].powi(2)).sum::<f64>().sqrt();
                let scale = if norm > 0.0 {
                    (1.0 - step * lambda / norm).max(0.0)
                } else {
                    0.0
                };
                z.iter_mut().for_each(|b| b[(j, l)] *= scale);
            }
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let change: f64 = z
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        y = z
            .iter()
            .zip(&x)
            .map(|(a, b)| a + (a - b) * ((t - 1.0) / t_next))
            .collect();
        x = z;
        t = t_next;
        if change < 1e-13 {
            break;
        }
    }
    let f = objective(gram, rho, lambda, &x);
    (x, f)
}

/// Ordinary least squares through an SVD.
pub fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().svd(true, true).solve(y, 1e-12).expect("svd solve")
}

/// Two or three well separated mixtures with known labels, identity design.
pub fn mixture_data(seed: u64, n: usize, p: usize, k: usize, s: usize) -> (Dataset, MixtureParams, Vec<usize>) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let beta: Vec<DMatrix<f64>> = (0..k)
        .map(|c| {
            DMatrix::from_fn(p, 1, |j, _| {
                if j < s {
                    1.5 * (c as f64 - (k as f64 - 1.0) / 2.0) + 0.5
                } else {
                    0.0
                }
            })
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let y = DVector::from_fn(n, |i, _| {
        (x.row(i) * &beta[labels[i]])[(0, 0)] + r.sample::<f64, _>(StandardNormal)
    });
    let truth = MixtureParams::new(DVector::from_element(k, 1.0 / k as f64), beta, 1.0).unwrap();
    (
        Dataset::univariate(x, y).unwrap(),
        truth,
        labels.iter().map(|l| l + 1).collect(),
    )
}

/// Random valid parameters for `data`.
pub fn random_params(seed: u64, p: usize, q: usize, k: usize, scale: f64) -> MixtureParams {
    let mut r = rng(seed);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let omega = DVector::from_iterator(k, raw.iter().map(|w| w / total));
    let beta = (0..k)
        .map(|_| DMatrix::from_fn(p, q, |_, _| scale * r.sample::<f64, _>(StandardNormal)))
        .collect();
    MixtureParams::new(omega, beta, 1.0).unwrap()
}
