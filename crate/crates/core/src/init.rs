//! Starting values for the EM engines.
//!
//! `screen_spectral` screens predictors with a BIC-tuned pooled lasso, builds
//! a residual-split candidate plus random-responsibility candidates on the
//! screened columns, refines each with a few penalized EM iterations and keeps
//! the one with the best penalized likelihood.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::em::{run_em, EmConfig, FitResult, LambdaMode, Sigma2Mode};
use crate::error::{Error, Result};
use crate::grouplasso::{lambda_max, solve_mstep, MStepProblem, SolverOptions};
use crate::model::{
    assign_labels, fitted, responsibilities, weighted_moments, Dataset, MixtureParams, Responsibilities,
};

/// EM iterations used to refine each candidate.
pub const SHORT_ITERS: usize = 3;
/// Candidates are refined at this fraction of the uniform-responsibility λ_max.
pub const CANDIDATE_LAMBDA_FRACTION: f64 = 0.02;
pub const LASSO_GRID_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub enum InitVariant {
    /// Lasso screening to at most `screen_size` predictors (default
    /// `⌊min(2n / log n, p)⌋`), then `restarts` candidates on the screened set.
    ScreenSpectral {
        screen_size: Option<usize>,
        restarts: usize,
    },
    RandomRestarts {
        restarts: usize,
        short_iters: usize,
    },
    /// The truth with its coefficients moved a distance of at most `radius`.
    OraclePerturb {
        truth: MixtureParams,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitStrategy {
    pub variant: InitVariant,
    pub seed: u64,
    /// Noise variance used while refining candidates and stored in the result.
    pub sigma2: f64,
}

impl InitStrategy {
    pub fn screen_spectral(seed: u64) -> Self {
        Self {
            variant: InitVariant::ScreenSpectral {
                screen_size: None,
                restarts: 10,
            },
            seed,
            sigma2: 1.0,
        }
    }

    pub fn random_restarts(restarts: usize, short_iters: usize, seed: u64) -> Self {
        Self {
            variant: InitVariant::RandomRestarts { restarts, short_iters },
            seed,
            sigma2: 1.0,
        }
    }

    pub fn oracle_perturb(truth: MixtureParams, radius: f64, seed: u64) -> Self {
        let sigma2 = truth.sigma2;
        Self {
            variant: InitVariant::OraclePerturb { truth, radius },
            seed,
            sigma2,
        }
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma2 = {}", self.sigma2)));
        }
        match &self.variant {
            InitVariant::ScreenSpectral { screen_size, restarts } => {
                if *restarts == 0 {
                    return Err(Error::InvalidConfig("restarts must be at least 1".into()));
                }
                if let Some(m) = screen_size {
                    if *m == 0 || *m > data.p() {
                        return Err(Error::InvalidConfig(format!(
                            "screen size {m} must be in 1..={}",
                            data.p()
                        )));
                    }
                }
            }
            InitVariant::RandomRestarts { restarts, .. } => {
                if *restarts == 0 {
                    return Err(Error::InvalidConfig("restarts must be at least 1".into()));
                }
            }
            InitVariant::OraclePerturb { truth, radius } => {
                truth.validate()?;
                if !(*radius >= 0.0) {
                    return Err(Error::InvalidConfig(format!("radius = {radius}")));
                }
                if truth.p() != data.p() || truth.q() != data.q() {
                    return Err(Error::DimensionMismatch("truth does not match the data".into()));
                }
            }
        }
        Ok(())
    }
}

/// Default screening size `⌊min(2n / log n, p)⌋`.
pub fn default_screen_size(n: usize, p: usize) -> usize {
    let m = (2.0 * n as f64 / (n as f64).ln()).floor() as usize;
    m.clamp(1, p)
}

/// Produce starting parameters with `k` mixtures.
pub fn initialize(data: &Dataset, k: usize, strategy: &InitStrategy) -> Result<MixtureParams> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    strategy.validate(data)?;
    match &strategy.variant {
        InitVariant::OraclePerturb { truth, radius } => {
            if truth.k() != k {
                return Err(Error::InvalidConfig("truth has a different number of mixtures".into()));
            }
            Ok(oracle_perturb(truth, *radius, strategy.seed))
        }
        _ if k == 1 => single_mixture(data, strategy),
        InitVariant::ScreenSpectral { screen_size, restarts } => {
            let m = screen_size.unwrap_or_else(|| default_screen_size(data.n(), data.p()));
            let screened = lasso_screen(data, m)?;
            if screened.is_empty() {
                return random_restarts(data, k, *restarts, SHORT_ITERS, strategy);
            }
            let sub = data.select_columns(&screened)?;
            let best = best_candidate(&sub, k, *restarts, SHORT_ITERS, true, strategy)?;
            Ok(best.embed_rows(&screened, data.p()))
        }
        InitVariant::RandomRestarts { restarts, short_iters } => {
            random_restarts(data, k, *restarts, *short_iters, strategy)
        }
    }
}

fn random_restarts(
    data: &Dataset,
    k: usize,
    restarts: usize,
    short_iters: usize,
    strategy: &InitStrategy,
) -> Result<MixtureParams> {
    best_candidate(data, k, restarts, short_iters, false, strategy)
}

/// Pooled least squares on the lasso-screened predictors.
fn single_mixture(data: &Dataset, strategy: &InitStrategy) -> Result<MixtureParams> {
    let m = match &strategy.variant {
        InitVariant::ScreenSpectral {
            screen_size: Some(m), ..
        } => *m,
        _ => default_screen_size(data.n(), data.p()),
    };
    let screened = lasso_screen(data, m)?;
    let mut beta = DMatrix::zeros(data.p(), data.q());
    if !screened.is_empty() {
        let sub = data.x().select_columns(&screened);
        let coef = least_squares(&sub, data.y());
        for (r, &j) in screened.iter().enumerate() {
            beta.row_mut(j).copy_from(&coef.row(r));
        }
    }
    MixtureParams::new(DVector::from_element(1, 1.0), vec![beta], strategy.sigma2)
}

/// Seed for candidate `c`, decorrelated from the strategy seed.
fn candidate_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((c as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// The refined candidate with the highest penalized likelihood.
fn best_candidate(
    data: &Dataset,
    k: usize,
    restarts: usize,
    short_iters: usize,
    spectral: bool,
    strategy: &InitStrategy,
) -> Result<MixtureParams> {
    let fits = candidate_fits(data, k, restarts, short_iters, spectral, strategy)?;
    let mut best: Option<(f64, MixtureParams)> = None;
    for fit in fits {
        let score = candidate_score(&fit);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, fit.params));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::InvalidConfig("no usable initial candidate".into()))
}

fn candidate_score(fit: &FitResult) -> f64 {
    fit.trace
        .records
        .last()
        .map(|r| r.objective)
        .unwrap_or(f64::NEG_INFINITY)
}

/// Builds `restarts` candidates and refines each with `short_iters` EM
/// iterations at a common λ. With `spectral`, candidate 0 is the
/// residual-split candidate. Candidates that cannot be formed are dropped.
fn candidate_fits(
    data: &Dataset,
    k: usize,
    restarts: usize,
    short_iters: usize,
    spectral: bool,
    strategy: &InitStrategy,
) -> Result<Vec<FitResult>> {
    let pooled = data.x().tr_mul(data.y()) / data.n() as f64;
    let lambda = CANDIDATE_LAMBDA_FRACTION * 2.0 * pooled.abs().max() / (k as f64).sqrt();
    let mut config = EmConfig::new(k);
    config.lambda_mode = LambdaMode::Fixed(lambda);
    config.sigma2_mode = Sigma2Mode::Fixed(strategy.sigma2);
    config.max_iter = short_iters.max(1);
    let p_eff = (data.p() * data.q()) as f64;

    let fits: Vec<Result<Option<FitResult>>> = (0..restarts)
        .into_par_iter()
        .map(|c| {
            let start = if spectral && c == 0 {
                residual_split(data, k, strategy.sigma2)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(strategy.seed, c));
                random_candidate(data, k, lambda, strategy.sigma2, &mut rng)?
            };
            match start {
                Some(s) => run_em(data, s, &config, p_eff).map(Some),
                None => Ok(None),
            }
        })
        .collect();
    fits.into_iter().filter_map(|f| f.transpose()).collect()
}

/// Split observations using the pooled-regression residuals and fit each part.
///
/// With residual `r = s · xᵀd + ε` for a hidden sign `s`, the matrix
/// `mean(r² x xᵀ) − mean(r²) Σ̂` is close to `2 Σ̂ d dᵀ Σ̂`; its leading
/// eigenvector gives the direction of `d` and the sign of `r · xᵀd` the split.
/// For K > 2 the residuals are cut into K equal-count bins. With several
/// responses the residuals are projected on their leading principal direction
/// first. Returns `None` when some part has fewer than two observations.
fn residual_split(data: &Dataset, k: usize, sigma2: f64) -> Option<MixtureParams> {
    let x = data.x();
    let n = data.n();
    let pooled = least_squares(x, data.y());
    let resid = data.y() - x * &pooled;
    let r: DVector<f64> = if data.q() == 1 {
        resid.column(0).into_owned()
    } else {
        let eig = resid.tr_mul(&resid).symmetric_eigen();
        let top = eig.eigenvalues.imax();
        resid * eig.eigenvectors.column(top)
    };
    let labels: Vec<usize> = if k == 2 {
        let d = moment_direction(x, &r)?;
        let xd = x * &d;
        (0..n).map(|i| usize::from(r[i] * xd[i] > 0.0)).collect()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| r[a].total_cmp(&r[b]));
        let mut labels = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            labels[i] = rank * k / n;
        }
        labels
    };
    let mut omega = Vec::with_capacity(k);
    let mut beta = Vec::with_capacity(k);
    for c in 0..k {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if rows.len() < 2 {
            return None;
        }
        omega.push(rows.len() as f64 / n as f64);
        beta.push(least_squares(&x.select_rows(&rows), &data.y().select_rows(&rows)));
    }
    MixtureParams::new(DVector::from_vec(omega), beta, sigma2).ok()
}

/// Leading direction of `mean(r² x xᵀ) − mean(r²) Σ̂`, mapped back through `Σ̂⁻¹`.
fn moment_direction(x: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let n = x.nrows() as f64;
    let r2 = r.component_mul(r);
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= r2[i];
    }
    let gram = x.tr_mul(x) / n;
    let m = weighted.tr_mul(x) / n - &gram * (r2.sum() / n);
    let eig = m.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    if !(eig.eigenvalues[top] > 0.0) {
        return None;
    }
    let u = eig.eigenvectors.column(top).into_owned();
    Some(
        least_squares_gram(gram, &DMatrix::from_column_slice(u.len(), 1, u.as_slice()))
            .column(0)
            .into_owned(),
    )
}

/// One penalized M-step from uniformly random row-stochastic responsibilities.
fn random_candidate(
    data: &Dataset,
    k: usize,
    lambda: f64,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<MixtureParams>> {
    let mut eta = DMatrix::from_fn(data.n(), k, |_, _| rng.random_range(0.05..1.0));
    for mut row in eta.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let eta = Responsibilities::new(eta)?;
    let moments = weighted_moments(&eta, data, None)?;
    let problem = MStepProblem::new(&moments.sigma_hat, &moments.rho_hat, lambda)?;
    let report = solve_mstep(&problem, None, &SolverOptions::default())?;
    let omega = &moments.omega_hat / moments.omega_hat.sum();
    Ok(MixtureParams::new(omega, report.beta, sigma2).ok())
}

fn oracle_perturb(truth: &MixtureParams, radius: f64, seed: u64) -> MixtureParams {
    if radius == 0.0 {
        return truth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, p, q) = (truth.k(), truth.p(), truth.q());
    let dim = k * p * q;
    let dirs: Vec<DMatrix<f64>> = (0..k)
        .map(|_| DMatrix::from_fn(p, q, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let norm = dirs.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
    // Uniform in the Frobenius ball of the given radius.
    let len = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    let scale = if norm > 0.0 { len / norm } else { 0.0 };
    let beta = truth.beta.iter().zip(&dirs).map(|(b, d)| b + d * scale).collect();
    let mut omega = truth.omega.clone();
    omega[0] += rng.random_range(-radius..=radius);
    let mut omega = project_to_simplex(&omega);
    const MIN_WEIGHT: f64 = 0.01;
    if omega.iter().any(|&w| w < MIN_WEIGHT) {
        omega.iter_mut().for_each(|w| *w = w.max(MIN_WEIGHT));
        let s = omega.sum();
        omega /= s;
    }
    MixtureParams {
        omega,
        beta,
        sigma2: truth.sigma2,
        sigma_y: truth.sigma_y.clone(),
    }
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_to_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Responsibilities and hard labels implied by a set of starting values.
pub fn init_responsibility_eval(init: &MixtureParams, data: &Dataset) -> Result<(Responsibilities, Vec<usize>)> {
    let eta = responsibilities(init, data)?;
    let labels = assign_labels(&eta);
    Ok((eta, labels))
}

/// Ridge-stabilised least squares `(XᵀX + εI)⁻¹ XᵀY`.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    least_squares_gram(x.tr_mul(x), &x.tr_mul(y))
}

/// `(G + εI)⁻¹ B` with a small ridge relative to the mean diagonal of `G`.
fn least_squares_gram(mut gram: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = gram.ncols();
    let scale = gram.trace() / m as f64;
    let ridge = 1e-6 * scale.max(1e-12);
    for j in 0..m {
        gram[(j, j)] += ridge;
    }
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => gram.lu().solve(rhs).unwrap_or_else(|| DMatrix::zeros(m, rhs.ncols())),
    }
}

/// Single-mixture lasso path tuned by BIC; returns the selected coefficients.
///
/// Every `(j, l)` entry is its own group, so this is an ordinary lasso per
/// response column with a shared λ.
pub fn lasso_bic(data: &Dataset, grid_len: usize) -> Result<DMatrix<f64>> {
    let eta = Responsibilities::new(DMatrix::from_element(data.n(), 1, 1.0))?;
    let moments = weighted_moments(&eta, data, None)?;
    let lmax = lambda_max(&moments.rho_hat);
    let (n, p, q) = (data.n() as f64, data.p(), data.q());
    if lmax == 0.0 {
        return Ok(DMatrix::zeros(p, q));
    }
    let grid = crate::em::default_grid(lmax, grid_len, 0.01);
    let mut beta = vec![DMatrix::zeros(p, q)];
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for &lambda in &grid {
        let problem = MStepProblem::new(&moments.sigma_hat, &moments.rho_hat, lambda)?;
        let report = solve_mstep(&problem, Some(&beta), &SolverOptions::default())?;
        beta = report.beta;
        let resid = data.y() - fitted(data.x(), &beta[0]);
        let rss = resid.norm_squared().max(f64::MIN_POSITIVE);
        let df = beta[0].iter().filter(|&&v| v != 0.0).count() as f64;
        let nq = n * q as f64;
        let score = nq * (rss / nq).ln() + df * n.ln();
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, beta[0].clone()));
        }
    }
    Ok(best.map(|(_, b)| b).unwrap_or_else(|| DMatrix::zeros(p, q)))
}

/// Up to `m` predictor indices selected by the BIC-tuned pooled lasso,
/// ordered by decreasing largest absolute coefficient.
pub fn lasso_screen(data: &Dataset, m: usize) -> Result<Vec<usize>> {
    let coef = lasso_bic(data, LASSO_GRID_LEN)?;
    let mut ranked: Vec<(usize, f64)> = (0..data.p())
        .map(|j| (j, coef.row(j).abs().max()))
        .filter(|&(_, v)| v > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(m);
    Ok(ranked.into_iter().map(|(j, _)| j).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> MixtureParams {
        MixtureParams::new(
            DVector::from_vec(vec![0.3, 0.7]),
            vec![
                DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -2.0]),
                DMatrix::from_column_slice(3, 1, &[0.5, 0.0, 1.0]),
            ],
            1.0,
        )
        .unwrap()
    }

    fn data() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(40, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(40, |i, _| {
            x[(i, 0)] - x[(i, 2)] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::univariate(x, y).unwrap()
    }

    #[test]
    fn zero_radius_returns_truth() {
        let t = truth();
        let got = initialize(&data(), 2, &InitStrategy::oracle_perturb(t.clone(), 0.0, 9)).unwrap();
        assert_eq!(got, t);
    }

    #[test]
    fn perturbation_stays_in_ball() {
        let t = truth();
        for seed in 0..50 {
            let got = initialize(&data(), 2, &InitStrategy::oracle_perturb(t.clone(), 0.4, seed)).unwrap();
            assert!(got.beta_distance(&t) <= 0.4);
            got.validate().unwrap();
        }
    }

    #[test]
    fn simplex_projection() {
        let v = project_to_simplex(&DVector::from_vec(vec![0.9, 0.5]));
        assert!((v - DVector::from_vec(vec![0.7, 0.3])).abs().max() < 1e-15);
        let v = project_to_simplex(&DVector::from_vec(vec![2.0, 0.1, 0.0]));
        assert_eq!(v, DVector::from_vec(vec![1.0, 0.0, 0.0]));
    }

    #[test]
    fn default_screen_size_formula() {
        // 2 · 400 / ln 400 ≈ 133.5
        assert_eq!(default_screen_size(400, 400), 133);
        assert_eq!(default_screen_size(400, 50), 50);
    }

    #[test]
    fn residual_split_candidates() {
        let d = data();
        let cand = residual_split(&d, 2, 1.0).unwrap();
        assert!((cand.omega.sum() - 1.0).abs() < 1e-12);
        assert!(residual_split(&d, 30, 1.0).is_none());
    }

    #[test]
    fn chosen_candidate_scores_highest() {
        let d = data();
        for seed in 0..5 {
            let s = InitStrategy::random_restarts(6, 3, seed);
            let fits = candidate_fits(&d, 2, 6, 3, true, &s).unwrap();
            let chosen = best_candidate(&d, 2, 6, 3, true, &s).unwrap();
            let top = fits.iter().map(candidate_score).fold(f64::NEG_INFINITY, f64::max);
            let winner = fits.iter().find(|f| f.params == chosen).expect("chosen is a candidate");
            assert_eq!(candidate_score(winner), top);
        }
    }

    #[test]
    fn symmetric_start_labels_everything_first() {
        let mut t = truth();
        t.beta[1] = t.beta[0].clone();
        t.omega = DVector::from_vec(vec![0.5, 0.5]);
        let (_, labels) = init_responsibility_eval(&t, &data()).unwrap();
        assert!(labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn invalid_strategies_are_rejected() {
        let d = data();
        assert!(initialize(&d, 0, &InitStrategy::screen_spectral(1)).is_err());
        assert!(initialize(&d, 2, &InitStrategy::random_restarts(0, 3, 1)).is_err());
        let mut s = InitStrategy::screen_spectral(1);
        s.variant = InitVariant::ScreenSpectral {
            screen_size: Some(10),
            restarts: 2,
        };
        assert!(initialize(&d, 2, &s).is_err());
    }
}
