//! Simulation designs, label-aligned scoring and the replicate runner.

use std::io::Write;
use std::path::Path;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::em::{bic_select, default_grid, em_fit, fit_path, path_lambda_max, EmConfig, FitResult, LambdaMode};
use crate::error::{Error, Result};
use crate::init::{init_responsibility_eval, initialize, lasso_bic, InitStrategy, LASSO_GRID_LEN};
use crate::model::{assign_labels, responsibilities, Dataset, MixtureParams};
use crate::multivariate::{mv_fit_path, mv_path_lambda_max, MvEmConfig};

/// Attempts at drawing a positive definite random covariance.
const COVARIANCE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    M1,
    M2,
    M3,
    M4,
    MV,
    Custom,
}

impl std::str::FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Self::M1),
            "M2" => Ok(Self::M2),
            "M3" => Ok(Self::M3),
            "M4" => Ok(Self::M4),
            "MV" => Ok(Self::MV),
            "CUSTOM" => Ok(Self::Custom),
            other => Err(Error::InvalidConfig(format!("unknown model id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `Σ_ij = rho^|i−j|`.
    Ar1(f64),
    /// Sparse random symmetric matrix with entries of magnitude in
    /// `[umin, umax]` and either sign, shifted to be positive definite and
    /// scaled to unit diagonal.
    ErdosRenyi {
        prob: f64,
        umin: f64,
        umax: f64,
        shift: f64,
    },
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefRecipe {
    /// Two mixtures. Nonzero entries of `β_1` are standard normal and
    /// `β_2 = β_1 + shifts[l] · sgn(β_1)` in response column `l`.
    Shift { shifts: Vec<f64> },
    /// Mixture `k` has the listed values on the first `s` rows (q = 1).
    Fixed { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub model_id: ModelId,
    pub n: usize,
    pub p: usize,
    /// Number of leading predictors with nonzero coefficients.
    pub s: usize,
    pub k: usize,
    pub q: usize,
    pub covariance: Covariance,
    pub recipe: CoefRecipe,
    pub omega: Vec<f64>,
    pub sigma2_true: f64,
    pub seed: u64,
}

impl SimSpec {
    fn two_mixture(model_id: ModelId, covariance: Covariance, shift: f64, seed: u64) -> Self {
        Self {
            model_id,
            n: 400,
            p: 400,
            s: 10,
            k: 2,
            q: 1,
            covariance,
            recipe: CoefRecipe::Shift { shifts: vec![shift] },
            omega: vec![0.5, 0.5],
            sigma2_true: 1.0,
            seed,
        }
    }

    pub fn m1(seed: u64) -> Self {
        Self::two_mixture(ModelId::M1, Covariance::Ar1(0.3), 2.0, seed)
    }

    pub fn m2(seed: u64) -> Self {
        Self::two_mixture(ModelId::M2, Covariance::Ar1(0.3), 1.0, seed)
    }

    pub fn m3(seed: u64) -> Self {
        let cov = Covariance::ErdosRenyi {
            prob: 0.1,
            umin: 0.5,
            umax: 1.0,
            shift: 0.05,
        };
        Self::two_mixture(ModelId::M3, cov, 2.0, seed)
    }

    /// Three mixtures with levels −1, an even spread over [1, 3], and 5.
    pub fn m4(seed: u64) -> Self {
        let s = 10;
        let spread = (0..s).map(|j| 1.0 + 2.0 * j as f64 / (s - 1) as f64).collect();
        Self {
            model_id: ModelId::M4,
            n: 600,
            p: 400,
            s,
            k: 3,
            q: 1,
            covariance: Covariance::Ar1(0.3),
            recipe: CoefRecipe::Fixed {
                values: vec![vec![-1.0; s], spread, vec![5.0; s]],
            },
            omega: vec![1.0 / 3.0; 3],
            sigma2_true: 1.0,
            seed,
        }
    }

    /// Two responses over `p = 100` predictors, five nonzero rows, shift 2 in
    /// the first response and `delta` in the second.
    pub fn mv(delta: f64, seed: u64) -> Self {
        Self {
            model_id: ModelId::MV,
            n: 400,
            p: 100,
            s: 5,
            k: 2,
            q: 2,
            covariance: Covariance::Ar1(0.3),
            recipe: CoefRecipe::Shift {
                shifts: vec![2.0, delta],
            },
            omega: vec![0.5, 0.5],
            sigma2_true: 1.0,
            seed,
        }
    }

    /// M1 with shift `delta`, used by the noise-variance misspecification study.
    pub fn sigma_study(delta: f64, seed: u64) -> Self {
        let mut spec = Self::m1(seed);
        spec.model_id = ModelId::Custom;
        spec.recipe = CoefRecipe::Shift { shifts: vec![delta] };
        spec
    }

    pub fn by_id(id: ModelId, seed: u64) -> Result<Self> {
        match id {
            ModelId::M1 => Ok(Self::m1(seed)),
            ModelId::M2 => Ok(Self::m2(seed)),
            ModelId::M3 => Ok(Self::m3(seed)),
            ModelId::M4 => Ok(Self::m4(seed)),
            ModelId::MV => Ok(Self::mv(2.0, seed)),
            ModelId::Custom => Err(Error::InvalidConfig("custom specs have no defaults".into())),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn with_p(&self, p: usize) -> Self {
        Self { p, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.p == 0 || self.q == 0 || self.k == 0 {
            return bad("p, q and k must be positive".into());
        }
        if self.s > self.p {
            return bad(format!("s = {} exceeds p = {}", self.s, self.p));
        }
        if self.omega.len() != self.k
            || self.omega.iter().any(|&w| !(w > 0.0))
            || (self.omega.iter().sum::<f64>() - 1.0).abs() > 1e-10
        {
            return bad("omega must be a positive probability vector of length k".into());
        }
        if !(self.sigma2_true > 0.0) {
            return bad(format!("sigma2_true = {}", self.sigma2_true));
        }
        match &self.recipe {
            CoefRecipe::Shift { shifts } => {
                if self.k != 2 || shifts.len() != self.q {
                    return bad("shift recipe needs k = 2 and one shift per response".into());
                }
            }
            CoefRecipe::Fixed { values } => {
                if self.q != 1 || values.len() != self.k || values.iter().any(|v| v.len() != self.s) {
                    return bad("fixed recipe needs q = 1 and k lists of s values".into());
                }
            }
        }
        match self.covariance {
            Covariance::Ar1(rho) if !(rho.abs() < 1.0) => bad(format!("AR coefficient {rho}")),
            Covariance::ErdosRenyi {
                prob,
                umin,
                umax,
                shift,
            } if !(0.0..=1.0).contains(&prob) || !(0.0 <= umin && umin <= umax) || !(shift > 0.0) => {
                bad("invalid Erdos-Renyi parameters".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimDraw {
    pub dataset: Dataset,
    /// Generating mixture of each observation, 1-based.
    pub labels: Vec<usize>,
    pub truth: MixtureParams,
    pub covariance: DMatrix<f64>,
    pub snr: f64,
}

pub fn ar1_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Random sparse covariance; returns the matrix before and after scaling to
/// unit diagonal.
pub fn erdos_renyi_covariance<R: Rng>(
    p: usize,
    prob: f64,
    umin: f64,
    umax: f64,
    shift: f64,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let raw = DMatrix::from_fn(p, p, |_, _| {
        if rng.random::<f64>() < prob {
            let u = rng.random_range(umin..=umax);
            if rng.random::<bool>() {
                u
            } else {
                -u
            }
        } else {
            0.0
        }
    });
    let mut sym = (&raw + raw.transpose()) * 0.5;
    let min_eig = sym.clone().symmetric_eigenvalues().min();
    let lift = (-min_eig).max(0.0) + shift;
    for i in 0..p {
        sym[(i, i)] += lift;
    }
    let d = sym.diagonal().map(|v| 1.0 / v.sqrt());
    let std = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { sym[(i, j)] * (d[i] * d[j]) });
    (sym, std)
}

fn draw_covariance(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match spec.covariance {
        Covariance::Identity => {
            let c = DMatrix::identity(spec.p, spec.p);
            Ok((c.clone(), c))
        }
        Covariance::Ar1(rho) => {
            let c = ar1_covariance(spec.p, rho);
            let l = c.clone().cholesky().ok_or(Error::SingularCovariance)?.l();
            Ok((c, l))
        }
        Covariance::ErdosRenyi {
            prob,
            umin,
            umax,
            shift,
        } => {
            for _ in 0..COVARIANCE_RETRIES {
                let (_, c) = erdos_renyi_covariance(spec.p, prob, umin, umax, shift, rng);
                if let Some(ch) = c.clone().cholesky() {
                    return Ok((c, ch.l()));
                }
            }
            Err(Error::SingularCovariance)
        }
    }
}

fn draw_truth(spec: &SimSpec, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    let (p, q, s) = (spec.p, spec.q, spec.s);
    match &spec.recipe {
        CoefRecipe::Shift { shifts } => {
            let mut b1 = DMatrix::zeros(p, q);
            for l in 0..q {
                for j in 0..s {
                    b1[(j, l)] = rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut b2 = b1.clone();
            for l in 0..q {
                for j in 0..s {
                    b2[(j, l)] += shifts[l] * b1[(j, l)].signum();
                }
            }
            vec![b1, b2]
        }
        CoefRecipe::Fixed { values } => values
            .iter()
            .map(|v| {
                let mut b = DMatrix::zeros(p, 1);
                for (j, &x) in v.iter().enumerate() {
                    b[(j, 0)] = x;
                }
                b
            })
            .collect(),
    }
}

/// Draw one dataset. Deterministic in `spec.seed`.
pub fn generate(spec: &SimSpec) -> Result<SimDraw> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (cov, chol) = draw_covariance(spec, &mut rng)?;
    let beta = draw_truth(spec, &mut rng);
    let (n, p, q) = (spec.n, spec.p, spec.q);
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = if spec.covariance == Covariance::Identity {
        z
    } else {
        z * chol.transpose()
    };
    let cat = WeightedIndex::new(&spec.omega).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let labels: Vec<usize> = (0..n).map(|_| cat.sample(&mut rng) + 1).collect();
    let sd = spec.sigma2_true.sqrt();
    let mut y = DMatrix::zeros(n, q);
    for i in 0..n {
        let b = &beta[labels[i] - 1];
        for l in 0..q {
            let mean: f64 = (0..spec.s).map(|j| x[(i, j)] * b[(j, l)]).sum();
            y[(i, l)] = mean + sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut truth = MixtureParams::new(DVector::from_vec(spec.omega.clone()), beta, spec.sigma2_true)?;
    if q > 1 {
        truth = truth.with_sigma_y(DMatrix::identity(q, q) * spec.sigma2_true)?;
    }
    let snr = snr(&truth.beta, &cov);
    Ok(SimDraw {
        dataset: Dataset::new(x, y)?,
        labels,
        truth,
        covariance: cov,
        snr,
    })
}

/// Separation of the mixtures: `√((β_a−β_b)ᵀ Σ (β_a−β_b))` for one response,
/// `√(Σ_l Δ_l²) / q` for several, minimized over mixture pairs.
pub fn snr(beta: &[DMatrix<f64>], cov: &DMatrix<f64>) -> f64 {
    let q = beta[0].ncols();
    let mut best = f64::INFINITY;
    for (a, b) in (0..beta.len()).tuple_combinations() {
        let d = &beta[a] - &beta[b];
        let sq: f64 = (0..q)
            .map(|l| {
                let c = d.column(l);
                c.dot(&(cov * c))
            })
            .sum();
        let delta = if q == 1 { sq.sqrt() } else { sq.sqrt() / q as f64 };
        best = best.min(delta);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBundle {
    pub beta_error: f64,
    pub omega_error: f64,
    pub label_error: f64,
    pub tpr: f64,
    pub fpr: f64,
}

impl MetricBundle {
    pub fn nan() -> Self {
        Self {
            beta_error: f64::NAN,
            omega_error: f64::NAN,
            label_error: f64::NAN,
            tpr: f64::NAN,
            fpr: f64::NAN,
        }
    }
}

/// Score a fit against the draw it was computed from. Labels are the
/// responsibility argmax of the fitted parameters on the draw's data.
pub fn align_and_score(fit: &FitResult, draw: &SimDraw) -> Result<MetricBundle> {
    score_params(&fit.params, draw)
}

pub fn score_params(params: &MixtureParams, draw: &SimDraw) -> Result<MetricBundle> {
    let eta = responsibilities(params, &draw.dataset)?;
    score_with_labels(params, &assign_labels(&eta), draw)
}

/// Score coefficients, weights and given 1-based labels. Every mixture
/// permutation is tried; the one with the smallest coefficient error is used
/// for all metrics.
pub fn score_with_labels(params: &MixtureParams, labels: &[usize], draw: &SimDraw) -> Result<MetricBundle> {
    if labels.len() != draw.labels.len() {
        return Err(Error::DimensionMismatch("fit and draw differ in shape".into()));
    }
    let (mut metrics, perm) = align(params, &draw.truth)?;
    let k = perm.len();
    // Fitted mixture m sits at position inv[m] after alignment.
    let mut inv = vec![0; k];
    for (pos, &m) in perm.iter().enumerate() {
        inv[m] = pos;
    }
    let wrong = labels
        .iter()
        .zip(&draw.labels)
        .filter(|(&l, &w)| inv[l - 1] + 1 != w)
        .count();
    metrics.label_error = 100.0 * wrong as f64 / labels.len() as f64;
    Ok(metrics)
}

/// Coefficient, weight and support scores without labels (`label_error` is NaN).
pub fn score_coefficients(params: &MixtureParams, truth: &MixtureParams) -> Result<MetricBundle> {
    align(params, truth).map(|(m, _)| m)
}

fn align(params: &MixtureParams, truth: &MixtureParams) -> Result<(MetricBundle, Vec<usize>)> {
    let k = truth.k();
    if params.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} mixtures, truth has {k}",
            params.k()
        )));
    }
    if params.p() != truth.p() || params.q() != truth.q() {
        return Err(Error::DimensionMismatch("fit and truth differ in shape".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let err = params.permuted(&perm).beta_distance(truth);
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, perm));
        }
    }
    let (beta_error, perm) = best.expect("at least one permutation");
    let aligned = params.permuted(&perm);
    let omega_error = 100.0 * (&aligned.omega - &truth.omega).abs().sum();
    let (tpr, fpr) = support_rates(&params.support(), &truth.support(), truth.p());
    let metrics = MetricBundle {
        beta_error,
        omega_error,
        label_error: f64::NAN,
        tpr,
        fpr,
    };
    Ok((metrics, perm))
}

/// True and false positive rates of predictor selection, in percent.
pub fn support_rates(selected: &[usize], truth: &[usize], p: usize) -> (f64, f64) {
    let hits = selected.iter().filter(|j| truth.contains(j)).count();
    let false_pos = selected.len() - hits;
    let tpr = if truth.is_empty() {
        100.0
    } else {
        100.0 * hits as f64 / truth.len() as f64
    };
    let negatives = p - truth.len();
    let fpr = if negatives == 0 {
        0.0
    } else {
        100.0 * false_pos as f64 / negatives as f64
    };
    (tpr, fpr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    /// Unpenalized EM on the true support from a perturbed truth.
    Oracle,
    /// Penalized EM over a λ grid from the screened initializer, tuned by BIC.
    Pem,
    /// Unpenalized EM refit on the support selected by `Pem`.
    Psem,
    /// Hard labels from the initializer, then a BIC-tuned lasso per mixture.
    Initial,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(Self::Oracle),
            "pem" => Ok(Self::Pem),
            "psem" => Ok(Self::Psem),
            "initial" => Ok(Self::Initial),
            other => Err(Error::InvalidConfig(format!("unknown pipeline {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Noise variance supplied to the fitting algorithm.
    pub sigma2: f64,
    pub grid_len: usize,
    pub grid_ratio: f64,
    pub oracle_radius: f64,
    pub em: EmConfig,
    /// Iteration budget for the unpenalized refits.
    pub refit_max_iter: usize,
}

impl PipelineOptions {
    pub fn new(k: usize) -> Self {
        Self {
            sigma2: 1.0,
            grid_len: 30,
            grid_ratio: 0.01,
            oracle_radius: 0.1,
            em: EmConfig::new(k),
            refit_max_iter: 200,
        }
    }
}

/// Fitted parameters plus what is needed to score them.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fit: FitResult,
    /// Labels to score instead of the fit's own responsibility argmax.
    pub labels: Option<Vec<usize>>,
}

impl PipelineOutput {
    pub fn score(&self, draw: &SimDraw) -> Result<MetricBundle> {
        match &self.labels {
            Some(l) => score_with_labels(&self.fit.params, l, draw),
            None => align_and_score(&self.fit, draw),
        }
    }
}

fn refit_config(opts: &PipelineOptions) -> EmConfig {
    let mut cfg = opts.em.clone();
    cfg.lambda_mode = LambdaMode::Fixed(0.0);
    cfg.sigma2_mode = crate::em::Sigma2Mode::Fixed(opts.sigma2);
    cfg.max_iter = opts.refit_max_iter;
    cfg.conv_tol = 1e-6;
    cfg
}

/// Unpenalized EM on the columns `rows` of `data`, embedded back to full size.
fn refit_on_support(
    data: &Dataset,
    start: &MixtureParams,
    rows: &[usize],
    opts: &PipelineOptions,
) -> Result<FitResult> {
    let sub = data.select_columns(rows)?;
    let init = start.restrict_rows(rows);
    let mut fit = if data.q() == 1 {
        em_fit(&sub, &init, &refit_config(opts))?
    } else {
        let cfg = MvEmConfig {
            base: refit_config(opts),
            sigma_y: DMatrix::identity(data.q(), data.q()) * opts.sigma2,
        };
        crate::multivariate::mv_em_fit(&sub, &init, &cfg)?
    };
    fit.params = fit.params.embed_rows(rows, data.p());
    fit.support = fit.params.support();
    Ok(fit)
}

/// BIC-tuned penalized EM path from the screened initializer.
pub fn fit_pem(data: &Dataset, k: usize, seed: u64, opts: &PipelineOptions) -> Result<FitResult> {
    let init = initialize(data, k, &InitStrategy::screen_spectral(seed).with_sigma2(opts.sigma2))?;
    fit_pem_from(data, &init, opts)
}

pub fn fit_pem_from(data: &Dataset, init: &MixtureParams, opts: &PipelineOptions) -> Result<FitResult> {
    let mut cfg = opts.em.clone();
    cfg.k = init.k();
    if data.q() == 1 {
        cfg.sigma2_mode = crate::em::Sigma2Mode::Fixed(opts.sigma2);
        let mut start = init.clone();
        start.sigma2 = opts.sigma2;
        let lmax = path_lambda_max(data, &start)?;
        let grid = default_grid(lmax, opts.grid_len, opts.grid_ratio);
        let path = fit_path(data, &start, &grid, &cfg)?;
        bic_select(&path, data)
    } else {
        let sigma_y = DMatrix::identity(data.q(), data.q()) * opts.sigma2;
        let lmax = mv_path_lambda_max(data, init, &sigma_y)?;
        let grid = default_grid(lmax, opts.grid_len, opts.grid_ratio);
        let mv = MvEmConfig { base: cfg, sigma_y };
        let path = mv_fit_path(data, init, &grid, &mv)?;
        bic_select(&path, data)
    }
}

/// Run one pipeline on one draw.
pub fn run_pipeline(pipeline: Pipeline, draw: &SimDraw, seed: u64, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let data = &draw.dataset;
    let k = draw.truth.k();
    let fit = match pipeline {
        Pipeline::Oracle => {
            let rows = draw.truth.support();
            if rows.is_empty() {
                return Err(Error::InvalidConfig("oracle fit needs a nonempty true support".into()));
            }
            let truth = draw.truth.restrict_rows(&rows);
            let start = initialize(
                &data.select_columns(&rows)?,
                k,
                &InitStrategy::oracle_perturb(truth, opts.oracle_radius, seed),
            )?
            .embed_rows(&rows, data.p());
            refit_on_support(data, &start, &rows, opts)?
        }
        Pipeline::Pem => fit_pem(data, k, seed, opts)?,
        Pipeline::Psem => {
            let pem = fit_pem(data, k, seed, opts)?;
            if pem.support.is_empty() || pem.degenerate() {
                pem
            } else {
                let rows = pem.support.clone();
                refit_on_support(data, &pem.params, &rows, opts)?
            }
        }
        Pipeline::Initial => {
            let init = initialize(data, k, &InitStrategy::screen_spectral(seed).with_sigma2(opts.sigma2))?;
            let (eta, labels) = init_responsibility_eval(&init, data)?;
            let mut beta = Vec::with_capacity(k);
            let mut omega = DVector::zeros(k);
            for c in 0..k {
                let rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == c + 1).collect();
                omega[c] = rows.len() as f64 / data.n() as f64;
                beta.push(if rows.len() >= 2 {
                    lasso_bic(&data.select_rows(&rows)?, LASSO_GRID_LEN)?
                } else {
                    DMatrix::zeros(data.p(), data.q())
                });
            }
            // Keep the weights strictly positive so the parameters stay valid.
            omega.iter_mut().for_each(|w| *w = w.max(1.0 / data.n() as f64));
            let total = omega.sum();
            omega /= total;
            let params = MixtureParams {
                omega,
                beta,
                sigma2: opts.sigma2,
                sigma_y: init.sigma_y.clone(),
            };
            let fit = FitResult {
                support: params.support(),
                params,
                trace: Default::default(),
                eta,
                lambda: f64::NAN,
                converged: true,
                bic: None,
            };
            return Ok(PipelineOutput {
                fit,
                labels: Some(labels),
            });
        }
    };
    Ok(PipelineOutput { fit, labels: None })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateRow {
    pub rep: usize,
    pub seed: u64,
    pub metrics: MetricBundle,
    pub degenerate: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: MetricBundle,
    pub se: MetricBundle,
    pub degenerate_rate: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateTable {
    pub rows: Vec<ReplicateRow>,
    pub summary: Summary,
}

pub const CSV_HEADER: [&str; 8] = [
    "rep",
    "seed",
    "beta_error",
    "omega_error",
    "label_error",
    "tpr",
    "fpr",
    "degenerate_flag",
];

impl ReplicateTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let doc = |e: csv::Error| Error::Document(e.to_string());
        w.write_record(CSV_HEADER).map_err(doc)?;
        for r in &self.rows {
            let m = r.metrics;
            w.write_record(&[
                r.rep.to_string(),
                r.seed.to_string(),
                m.beta_error.to_string(),
                m.omega_error.to_string(),
                m.label_error.to_string(),
                m.tpr.to_string(),
                m.fpr.to_string(),
                u8::from(r.degenerate).to_string(),
            ])
            .map_err(doc)?;
        }
        w.flush().map_err(|e| Error::Document(e.to_string()))
    }

    /// Summary as two CSV rows, `mean` and `se`, under the table's columns.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let doc = |e: csv::Error| Error::Document(e.to_string());
        w.write_record([
            "stat",
            "beta_error",
            "omega_error",
            "label_error",
            "tpr",
            "fpr",
            "degenerate_rate",
            "failures",
        ])
        .map_err(doc)?;
        let s = &self.summary;
        for (name, m, extra) in [("mean", s.mean, s.degenerate_rate), ("se", s.se, 0.0)] {
            w.write_record(&[
                name.to_string(),
                m.beta_error.to_string(),
                m.omega_error.to_string(),
                m.label_error.to_string(),
                m.tpr.to_string(),
                m.fpr.to_string(),
                extra.to_string(),
                s.failures.to_string(),
            ])
            .map_err(doc)?;
        }
        w.flush().map_err(|e| Error::Document(e.to_string()))
    }

    pub fn save(&self, table: &Path, summary: &Path) -> Result<()> {
        let open = |p: &Path| {
            std::fs::File::create(p).map_err(|source| Error::Io {
                path: p.display().to_string(),
                source,
            })
        };
        self.write_csv(open(table)?)?;
        self.write_summary_csv(open(summary)?)
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Means and standard errors of the mean over replicates that did not fail.
pub fn summarize(rows: &[ReplicateRow]) -> Summary {
    let ok: Vec<&ReplicateRow> = rows.iter().filter(|r| !r.failed).collect();
    let stat = |f: fn(&MetricBundle) -> f64| mean_se(&ok.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let cols = [
        stat(|m| m.beta_error),
        stat(|m| m.omega_error),
        stat(|m| m.label_error),
        stat(|m| m.tpr),
        stat(|m| m.fpr),
    ];
    let bundle = |i: usize| MetricBundle {
        beta_error: [cols[0].0, cols[0].1][i],
        omega_error: [cols[1].0, cols[1].1][i],
        label_error: [cols[2].0, cols[2].1][i],
        tpr: [cols[3].0, cols[3].1][i],
        fpr: [cols[4].0, cols[4].1][i],
    };
    let degenerate_rate = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().filter(|r| r.degenerate).count() as f64 / ok.len() as f64
    };
    Summary {
        mean: bundle(0),
        se: bundle(1),
        degenerate_rate,
        failures: rows.len() - ok.len(),
    }
}

/// Replicate `r` uses seed `spec.seed + r` unless `seeds` is given.
pub fn replicate_seeds(spec: &SimSpec, reps: usize, seeds: Option<&[u64]>) -> Result<Vec<u64>> {
    match seeds {
        Some(s) if s.len() != reps => Err(Error::InvalidConfig(format!("{} seeds for {reps} replicates", s.len()))),
        Some(s) => Ok(s.to_vec()),
        None => Ok((0..reps as u64).map(|r| spec.seed.wrapping_add(r)).collect()),
    }
}

/// Run `pipeline` on `reps` independent draws in parallel. A replicate whose
/// generation or fit fails contributes a row of NaNs flagged as failed.
pub fn run_replicates(
    spec: &SimSpec,
    pipeline: Pipeline,
    reps: usize,
    seeds: Option<&[u64]>,
    opts: &PipelineOptions,
) -> Result<ReplicateTable> {
    if reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    spec.validate()?;
    let seeds = replicate_seeds(spec, reps, seeds)?;
    let rows: Vec<ReplicateRow> = seeds
        .par_iter()
        .enumerate()
        .map(|(rep, &seed)| {
            let outcome = generate(&spec.with_seed(seed)).and_then(|draw| {
                run_pipeline(pipeline, &draw, seed, opts).and_then(|o| Ok((o.score(&draw)?, o.fit.degenerate())))
            });
            match outcome {
                Ok((metrics, degenerate)) => ReplicateRow {
                    rep,
                    seed,
                    metrics,
                    degenerate,
                    failed: false,
                },
                Err(_) => ReplicateRow {
                    rep,
                    seed,
                    metrics: MetricBundle::nan(),
                    degenerate: false,
                    failed: true,
                },
            }
        })
        .collect();
    let summary = summarize(&rows);
    Ok(ReplicateTable { rows, summary })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaCell {
    pub delta: f64,
    pub sigma2: f64,
    pub mean_beta_error: f64,
    pub se: f64,
    pub failures: usize,
}

/// PEM β errors over a grid of signal strengths and supplied noise variances.
/// Every cell of a row reuses the same draws (seeds `base_seed + r`).
pub fn sigma_misspec_study(
    deltas: &[f64],
    sigma2s: &[f64],
    reps: usize,
    base_seed: u64,
    opts: &PipelineOptions,
) -> Result<Vec<SigmaCell>> {
    let mut cells = Vec::with_capacity(deltas.len() * sigma2s.len());
    for &delta in deltas {
        let spec = SimSpec::sigma_study(delta, base_seed);
        for &sigma2 in sigma2s {
            let cell_opts = PipelineOptions { sigma2, ..opts.clone() };
            let table = run_replicates(&spec, Pipeline::Pem, reps, None, &cell_opts)?;
            cells.push(SigmaCell {
                delta,
                sigma2,
                mean_beta_error: table.summary.mean.beta_error,
                se: table.summary.se.beta_error,
                failures: table.summary.failures,
            });
        }
    }
    Ok(cells)
}

pub fn write_sigma_grid<W: Write>(cells: &[SigmaCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let doc = |e: csv::Error| Error::Document(e.to_string());
    w.write_record(["delta", "sigma2", "mean_beta_error", "se", "failures"])
        .map_err(doc)?;
    for c in cells {
        w.write_record(&[
            c.delta.to_string(),
            c.sigma2.to_string(),
            c.mean_beta_error.to_string(),
            c.se.to_string(),
            c.failures.to_string(),
        ])
        .map_err(doc)?;
    }
    w.flush().map_err(|e| Error::Document(e.to_string()))
}

/// Joint versus per-response fitting of one two-response draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvComparison {
    pub seed: u64,
    pub joint_col2_error: f64,
    pub separate_col2_error: f64,
    pub joint_label_error: f64,
    pub separate_label_error: f64,
}

/// Coefficient error of one response column after the best mixture permutation.
fn column_error(params: &MixtureParams, col: usize, truth: &MixtureParams, truth_col: usize) -> f64 {
    let k = truth.k();
    (0..k)
        .permutations(k)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(pos, &m)| (params.beta[m].column(col) - truth.beta[pos].column(truth_col)).norm_squared())
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Fit the two-response design jointly and response 2 on its own.
pub fn mv_compare_once(delta: f64, seed: u64, opts: &PipelineOptions) -> Result<MvComparison> {
    let draw = generate(&SimSpec::mv(delta, seed))?;
    let joint = fit_pem(&draw.dataset, 2, seed, opts)?;
    let joint_metrics = align_and_score(&joint, &draw)?;

    let data2 = draw.dataset.response_column(1);
    let sep = fit_pem(&data2, 2, seed, opts)?;
    let truth2 = draw.truth.restrict_columns(1);
    let draw2 = SimDraw {
        dataset: data2,
        labels: draw.labels.clone(),
        truth: truth2,
        covariance: draw.covariance.clone(),
        snr: f64::NAN,
    };
    let sep_metrics = align_and_score(&sep, &draw2)?;
    Ok(MvComparison {
        seed,
        joint_col2_error: column_error(&joint.params, 1, &draw.truth, 1),
        separate_col2_error: column_error(&sep.params, 0, &draw.truth, 1),
        joint_label_error: joint_metrics.label_error,
        separate_label_error: sep_metrics.label_error,
    })
}

pub fn mv_comparison(delta: f64, reps: usize, base_seed: u64, opts: &PipelineOptions) -> Result<Vec<MvComparison>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|r| mv_compare_once(delta, base_seed.wrapping_add(r), opts))
        .collect()
}
