//! Penalized EM for a q-variate response with known noise covariance `Σ_y`.
//!
//! A general `Σ_y` is reduced to the identity by whitening, `ỹ = Σ_y^{-1/2} y`
//! and `β̃ = β Σ_y^{-1/2}`; the shared EM loop then runs with one size-K group
//! per coefficient entry `(j, l)` and the result is mapped back.

use nalgebra::DMatrix;

use crate::em::{run_em, run_path, EmConfig, FitResult, LambdaMode, Sigma2Mode};
use crate::error::{Error, Result};
use crate::grouplasso::group_norm_sum;
use crate::model::{loglik, support_of, Dataset, MixtureParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MvEmConfig {
    pub base: EmConfig,
    /// Known response noise covariance, q × q, symmetric positive definite.
    pub sigma_y: DMatrix<f64>,
}

impl MvEmConfig {
    pub fn new(k: usize, q: usize) -> Self {
        Self {
            base: EmConfig::new(k),
            sigma_y: DMatrix::identity(q, q),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.base.lambda_mode = LambdaMode::Fixed(lambda);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if matches!(self.base.sigma2_mode, Sigma2Mode::Adaptive { .. }) {
            return Err(Error::InvalidConfig(
                "the multivariate engine treats the noise covariance as known".into(),
            ));
        }
        Whitener::new(&self.sigma_y).map(|_| ())
    }
}

/// `Σ_j Σ_l √(Σ_k (β_k)_{jl}²)`.
pub fn mv_group_norm(beta: &[DMatrix<f64>]) -> f64 {
    group_norm_sum(beta)
}

/// Symmetric square roots of `Σ_y` and its inverse.
#[derive(Debug, Clone)]
pub struct Whitener {
    inv_sqrt: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    log_det: f64,
    identity: bool,
}

impl Whitener {
    pub fn new(sigma_y: &DMatrix<f64>) -> Result<Self> {
        let q = sigma_y.nrows();
        if sigma_y.ncols() != q || q == 0 {
            return Err(Error::DimensionMismatch("sigma_y must be square".into()));
        }
        if (sigma_y - sigma_y.transpose()).abs().max() > 1e-10 * sigma_y.abs().max().max(1.0) {
            return Err(Error::InvalidParams("sigma_y is not symmetric".into()));
        }
        if *sigma_y == DMatrix::identity(q, q) {
            return Ok(Self {
                inv_sqrt: sigma_y.clone(),
                sqrt: sigma_y.clone(),
                log_det: 0.0,
                identity: true,
            });
        }
        let eig = sigma_y.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::SingularCovariance);
        }
        let vecs = &eig.eigenvectors;
        let scaled = |f: &dyn Fn(f64) -> f64| {
            let mut d = vecs.clone();
            for (c, mut col) in d.column_iter_mut().enumerate() {
                col *= f(eig.eigenvalues[c]);
            }
            &d * vecs.transpose()
        };
        Ok(Self {
            inv_sqrt: scaled(&|v| 1.0 / v.sqrt()),
            sqrt: scaled(&|v| v.sqrt()),
            log_det: eig.eigenvalues.iter().map(|v| v.ln()).sum(),
            identity: false,
        })
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn whiten_data(&self, data: &Dataset) -> Result<Dataset> {
        if self.identity {
            return Ok(data.clone());
        }
        data.with_response(data.y() * &self.inv_sqrt)
    }

    pub fn whiten_beta(&self, beta: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        if self.identity {
            return beta.to_vec();
        }
        beta.iter().map(|b| b * &self.inv_sqrt).collect()
    }

    pub fn unwhiten_beta(&self, beta: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        if self.identity {
            return beta.to_vec();
        }
        beta.iter().map(|b| b * &self.sqrt).collect()
    }
}

fn whitened_start(init: &MixtureParams, w: &Whitener) -> MixtureParams {
    MixtureParams {
        omega: init.omega.clone(),
        beta: w.whiten_beta(&init.beta),
        sigma2: 1.0,
        sigma_y: None,
    }
}

fn check(data: &Dataset, init: &MixtureParams, config: &MvEmConfig) -> Result<Whitener> {
    config.validate()?;
    init.validate()?;
    if init.k() != config.base.k {
        return Err(Error::InvalidConfig(format!(
            "initial values have {} mixtures, config asks for {}",
            init.k(),
            config.base.k
        )));
    }
    if init.p() != data.p() || init.q() != data.q() || config.sigma_y.nrows() != data.q() {
        return Err(Error::DimensionMismatch(format!(
            "data has p={}, q={}; initial coefficients are {}x{}; sigma_y is {}x{}",
            data.p(),
            data.q(),
            init.p(),
            init.q(),
            config.sigma_y.nrows(),
            config.sigma_y.ncols()
        )));
    }
    Whitener::new(&config.sigma_y)
}

/// Penalized EM for the multivariate-response mixture model.
///
/// With `q = 1` and `Σ_y = [1]` this performs exactly the same arithmetic as
/// [`crate::em::em_fit`] at σ² = 1. Trace likelihoods are reported on the
/// original response scale; penalties refer to the whitened coefficients.
pub fn mv_em_fit(data: &Dataset, init: &MixtureParams, config: &MvEmConfig) -> Result<FitResult> {
    let w = check(data, init, config)?;
    let white = w.whiten_data(data)?;
    let p_eff = (data.p() * data.q()) as f64;
    let fit = run_em(&white, whitened_start(init, &w), &config.base, p_eff)?;
    Ok(unwhiten_fit(fit, &w, &config.sigma_y))
}

fn unwhiten_fit(mut fit: FitResult, w: &Whitener, sigma_y: &DMatrix<f64>) -> FitResult {
    let shift = -0.5 * w.log_det;
    for r in fit.trace.records.iter_mut() {
        r.loglik += shift;
        r.objective += shift;
        r.penalized_loglik += shift;
    }
    fit.params.beta = w.unwhiten_beta(&fit.params.beta);
    fit.params.sigma2 = 1.0;
    fit.params.sigma_y = Some(sigma_y.clone());
    fit.support = support_of(&fit.params.beta);
    fit
}

/// Fit every λ of a strictly descending grid with the multivariate engine.
pub fn mv_fit_path(
    data: &Dataset,
    init: &MixtureParams,
    lambdas: &[f64],
    config: &MvEmConfig,
) -> Result<Vec<FitResult>> {
    let w = check(data, init, config)?;
    let mut start = init.clone();
    start.sigma2 = 1.0;
    start.sigma_y = Some(config.sigma_y.clone());
    run_path(
        &start,
        lambdas,
        |p, lambda| {
            let cfg = MvEmConfig {
                base: EmConfig {
                    lambda_mode: LambdaMode::Fixed(lambda),
                    ..config.base.clone()
                },
                sigma_y: config.sigma_y.clone(),
            };
            mv_em_fit(data, p, &cfg)
        },
        |p, lambda| Ok(loglik(p, data)? - 0.5 * lambda * group_norm_sum(&w.whiten_beta(&p.beta))),
    )
}

/// Largest useful λ for a path from `init`, computed on the whitened problem.
pub fn mv_path_lambda_max(data: &Dataset, init: &MixtureParams, sigma_y: &DMatrix<f64>) -> Result<f64> {
    let w = Whitener::new(sigma_y)?;
    crate::em::path_lambda_max(&w.whiten_data(data)?, &whitened_start(init, &w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_hand_values() {
        assert_eq!(mv_group_norm(&[DMatrix::zeros(3, 2), DMatrix::zeros(3, 2)]), 0.0);
        let mut a = DMatrix::zeros(2, 2);
        let mut b = DMatrix::zeros(2, 2);
        a[(1, 0)] = 3.0;
        b[(1, 0)] = 4.0;
        assert_eq!(mv_group_norm(&[a, b]), 5.0);
    }

    #[test]
    fn group_norm_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(5, 4, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let mut direct = 0.0;
        for j in 0..5 {
            for l in 0..4 {
                let mut s = 0.0;
                for b in &beta {
                    s += b[(j, l)] * b[(j, l)];
                }
                direct += f64::sqrt(s);
            }
        }
        assert!((mv_group_norm(&beta) - direct).abs() < 1e-12);
    }

    #[test]
    fn whitener_roots_are_consistent() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let w = Whitener::new(&s).unwrap();
        let back = &w.inv_sqrt * &s * &w.inv_sqrt;
        assert!((back - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
        assert!((&w.sqrt * &w.sqrt - &s).abs().max() < 1e-12);
        assert!((w.log_det - s.determinant().ln()).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Whitener::new(&bad), Err(Error::SingularCovariance)));
    }

    #[test]
    fn adaptive_variance_is_rejected() {
        let mut c = MvEmConfig::new(2, 2);
        c.base.sigma2_mode = Sigma2Mode::Adaptive { initial: 1.0 };
        assert!(c.validate().is_err());
    }
}
