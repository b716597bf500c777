//! Penalized EM for the univariate mixture regression model, plus the λ path
//! and BIC tuning built on top of it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grouplasso::{group_norm_sum, lambda_max, solve_mstep, MStepProblem, SolverOptions};
use crate::model::{
    e_step, loglik, support_of, update_sigma2, weighted_moments, Dataset, MixtureParams, Responsibilities,
};

/// A fitted mixing weight below this marks the fit as degenerate.
pub const DEGENERATE_WEIGHT: f64 = 1e-3;

/// Lower bound applied to adaptively updated σ².
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// Penalty level used by successive M-steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Fixed(f64),
    /// `λ_{t+1} = κ λ_t + c √(log(p) log(n)² / n)`, starting from `lambda0`.
    Schedule {
        lambda0: f64,
        kappa: f64,
        floor_coefficient: f64,
    },
}

impl LambdaMode {
    pub fn initial(&self) -> f64 {
        match *self {
            LambdaMode::Fixed(l) => l,
            LambdaMode::Schedule { lambda0, .. } => lambda0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma2Mode {
    Fixed(f64),
    /// Re-estimated after every M-step from the weighted residuals.
    Adaptive {
        initial: f64,
    },
}

impl Sigma2Mode {
    pub fn initial(&self) -> f64 {
        match *self {
            Sigma2Mode::Fixed(s) => s,
            Sigma2Mode::Adaptive { initial } => initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub lambda_mode: LambdaMode,
    pub sigma2_mode: Sigma2Mode,
    /// Maximum number of EM iterations, T.
    pub max_iter: usize,
    /// Stop when the Frobenius change of the stacked coefficients falls below this.
    pub conv_tol: f64,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            lambda_mode: LambdaMode::Fixed(0.0),
            sigma2_mode: Sigma2Mode::Fixed(1.0),
            max_iter: 20,
            conv_tol: 1e-3,
            solver: SolverOptions::default(),
            seed: 0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_mode = LambdaMode::Fixed(lambda);
        self
    }

    pub fn with_sigma2(mut self, mode: Sigma2Mode) -> Self {
        self.sigma2_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidConfig(format!("conv_tol = {}", self.conv_tol)));
        }
        match self.lambda_mode {
            LambdaMode::Fixed(l) if !(l >= 0.0) => return Err(Error::InvalidConfig(format!("lambda = {l}"))),
            LambdaMode::Schedule {
                lambda0,
                kappa,
                floor_coefficient,
            } => {
                if !(kappa > 0.0 && kappa < 0.5) {
                    return Err(Error::InvalidConfig(format!("kappa = {kappa} is outside (0, 1/2)")));
                }
                if !(lambda0 >= 0.0) || !(floor_coefficient >= 0.0) {
                    return Err(Error::InvalidConfig("schedule constants must be nonnegative".into()));
                }
            }
            _ => {}
        }
        let s2 = self.sigma2_mode.initial();
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma2 = {s2}")));
        }
        Ok(())
    }
}

/// State after one EM iteration (record 0 is the starting point).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// `loglik − λ/(2σ²) · penalty`, the quantity each fixed-λ iteration ascends.
    pub objective: f64,
    /// `loglik − (λ/2) · penalty`.
    pub penalized_loglik: f64,
    pub loglik: f64,
    pub omega: DVector<f64>,
    pub delta_beta: f64,
    pub sigma2: f64,
    pub solver_iterations: usize,
    pub solver_kkt_gap: f64,
    pub solver_converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub records: Vec<IterationRecord>,
    /// Some mixing weight fell below [`DEGENERATE_WEIGHT`]; the fit stopped early.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl EmTrace {
    pub fn total_solver_iterations(&self) -> usize {
        self.records.iter().map(|r| r.solver_iterations).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    pub trace: EmTrace,
    pub eta: Responsibilities,
    /// Predictors with a nonzero coefficient in some mixture.
    pub support: Vec<usize>,
    /// Penalty level of the final M-step.
    pub lambda: f64,
    pub converged: bool,
    pub bic: Option<f64>,
}

impl FitResult {
    pub fn degenerate(&self) -> bool {
        self.trace.degenerate
    }

    pub fn iterations(&self) -> usize {
        self.trace.records.len().saturating_sub(1)
    }
}

/// `√(log(p) · log(n)² / n)`, the statistical floor of the λ schedule.
pub fn schedule_floor_base(n: usize, p_eff: f64) -> f64 {
    let n = n as f64;
    (p_eff.ln().max(0.0) * n.ln().powi(2) / n).sqrt()
}

/// Next penalty level; fixed mode returns `lambda_t` unchanged.
pub fn lambda_schedule_next(lambda_t: f64, mode: &LambdaMode, floor_base: f64) -> f64 {
    match *mode {
        LambdaMode::Fixed(_) => lambda_t,
        LambdaMode::Schedule {
            kappa,
            floor_coefficient,
            ..
        } => kappa * lambda_t + floor_coefficient * floor_base,
    }
}

/// Objective ascended by EM at fixed λ and σ²: the M-step scales the
/// penalty by σ² relative to the expected complete-data log-likelihood.
pub(crate) fn ascent_objective(ll: f64, beta: &[DMatrix<f64>], lambda: f64, sigma2: f64) -> f64 {
    ll - 0.5 * lambda / sigma2 * group_norm_sum(beta)
}

fn check_init(data: &Dataset, init: &MixtureParams, config: &EmConfig) -> Result<()> {
    config.validate()?;
    init.validate()?;
    if init.k() != config.k {
        return Err(Error::InvalidConfig(format!(
            "initial values have {} mixtures, config asks for {}",
            init.k(),
            config.k
        )));
    }
    if init.p() != data.p() || init.q() != data.q() {
        return Err(Error::DimensionMismatch(format!(
            "initial coefficients are {}x{}, data has p={}, q={}",
            init.p(),
            init.q(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

/// Group-lasso penalized EM for a univariate response.
///
/// σ² enters only the E-step; the M-step objective is used without σ²
/// scaling. Stops when the coefficients move less than `conv_tol` in
/// Frobenius norm or after `max_iter` iterations. A collapsing mixing weight
/// ends the fit early with [`EmTrace::degenerate`] set.
pub fn em_fit(data: &Dataset, init: &MixtureParams, config: &EmConfig) -> Result<FitResult> {
    check_init(data, init, config)?;
    if data.q() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "univariate engine needs q = 1, got q = {}; use the multivariate engine",
            data.q()
        )));
    }
    let mut start = init.clone();
    start.sigma_y = None;
    start.sigma2 = config.sigma2_mode.initial();
    run_em(data, start, config, data.p() as f64)
}

/// The EM loop shared by the univariate and (whitened) multivariate engines.
pub(crate) fn run_em(data: &Dataset, mut params: MixtureParams, config: &EmConfig, p_eff: f64) -> Result<FitResult> {
    if matches!(config.sigma2_mode, Sigma2Mode::Adaptive { .. }) && data.q() != 1 {
        return Err(Error::InvalidConfig(
            "adaptive sigma2 needs a univariate response".into(),
        ));
    }
    let floor_base = schedule_floor_base(data.n(), p_eff);
    let mut lambda = config.lambda_mode.initial();
    let (mut eta, ll) = e_step(&params, data)?;
    let mut trace = EmTrace::default();
    trace.records.push(IterationRecord {
        iteration: 0,
        lambda,
        objective: ascent_objective(ll, &params.beta, lambda, params.sigma2),
        penalized_loglik: ll - 0.5 * lambda * group_norm_sum(&params.beta),
        loglik: ll,
        omega: params.omega.clone(),
        delta_beta: 0.0,
        sigma2: params.sigma2,
        solver_iterations: 0,
        solver_kkt_gap: 0.0,
        solver_converged: true,
    });
    let mut converged = false;
    for t in 0..config.max_iter {
        let moments = weighted_moments(&eta, data, None)?;
        if moments.omega_hat.iter().any(|&w| w < DEGENERATE_WEIGHT) {
            trace.degenerate = true;
            trace.warnings.push(format!(
                "iteration {}: mixing weight {:.3e} below {DEGENERATE_WEIGHT}",
                t + 1,
                moments.omega_hat.min()
            ));
            break;
        }
        let next_lambda = lambda_schedule_next(lambda, &config.lambda_mode, floor_base);
        let problem = MStepProblem::new(&moments.sigma_hat, &moments.rho_hat, next_lambda)?;
        let report = solve_mstep(&problem, Some(&params.beta), &config.solver)?;
        if !report.converged {
            trace.warnings.push(format!(
                "iteration {}: M-step stopped after {} sweeps with KKT gap {:.3e}",
                t + 1,
                report.iterations,
                report.final_kkt_gap
            ));
        }
        let omega = &moments.omega_hat / moments.omega_hat.sum();
        let mut next = MixtureParams {
            omega,
            beta: report.beta,
            sigma2: params.sigma2,
            sigma_y: None,
        };
        if let Sigma2Mode::Adaptive { .. } = config.sigma2_mode {
            let (eta_next, _) = e_step(&next, data)?;
            next.sigma2 = match update_sigma2(&eta_next, &next, data) {
                Ok(s2) => s2.max(SIGMA2_FLOOR),
                Err(Error::DegenerateFit) => SIGMA2_FLOOR,
                Err(e) => return Err(e),
            };
        }
        let delta_beta = next.beta_distance(&params);
        let (eta_next, ll_next) = e_step(&next, data)?;
        trace.records.push(IterationRecord {
            iteration: t + 1,
            lambda: next_lambda,
            objective: ascent_objective(ll_next, &next.beta, next_lambda, next.sigma2),
            penalized_loglik: ll_next - 0.5 * next_lambda * group_norm_sum(&next.beta),
            loglik: ll_next,
            omega: next.omega.clone(),
            delta_beta,
            sigma2: next.sigma2,
            solver_iterations: report.iterations,
            solver_kkt_gap: report.final_kkt_gap,
            solver_converged: report.converged,
        });
        params = next;
        eta = eta_next;
        lambda = next_lambda;
        if delta_beta < config.conv_tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        support: support_of(&params.beta),
        params,
        trace,
        eta,
        lambda,
        converged,
        bic: None,
    })
}

/// Smallest λ for which a fit started from `init` stays at β = 0 throughout.
///
/// The first M-step is zero once λ exceeds `lambda_max` of the moments under
/// `init`; afterwards all mixtures coincide, responsibilities equal the mixing
/// weights, and the zero solution persists once λ exceeds `2 ‖ω̂‖ max |xᵀy/n|`.
pub fn path_lambda_max(data: &Dataset, init: &MixtureParams) -> Result<f64> {
    let (eta, _) = e_step(init, data)?;
    let moments = weighted_moments(&eta, data, None)?;
    let first = lambda_max(&moments.rho_hat);
    let pooled = data.x().tr_mul(data.y()) / data.n() as f64;
    let zero_state = 2.0 * moments.omega_hat.norm() * pooled.abs().max();
    Ok(first.max(zero_state))
}

/// `len` log-spaced values from `lambda_max` down to `ratio · lambda_max`.
pub fn default_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len <= 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..len)
        .map(|i| (hi + (lo - hi) * i as f64 / (len - 1) as f64).exp())
        .collect()
}

pub(crate) fn check_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidConfig(
            "lambda grid entries must be finite and nonnegative".into(),
        ));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidConfig("lambda grid must be strictly descending".into()));
    }
    Ok(())
}

/// Sequential path fitting shared by both engines.
///
/// Each λ starts from whichever of the previous solution and `init` scores
/// higher at that λ; ties keep the warm start. Plain warm starting from the
/// top of the path would inherit the all-zero solution of large λ, where
/// every mixture coincides and EM can no longer separate them.
pub(crate) fn run_path<F, S>(init: &MixtureParams, lambdas: &[f64], mut fit: F, mut score: S) -> Result<Vec<FitResult>>
where
    F: FnMut(&MixtureParams, f64) -> Result<FitResult>,
    S: FnMut(&MixtureParams, f64) -> Result<f64>,
{
    check_grid(lambdas)?;
    let mut out: Vec<FitResult> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let start = match out.last() {
            None => init.clone(),
            Some(prev) => {
                let mut warm = prev.params.clone();
                warm.sigma2 = init.sigma2;
                warm.sigma_y = init.sigma_y.clone();
                if score(&warm, lambda)? >= score(init, lambda)? {
                    warm
                } else {
                    init.clone()
                }
            }
        };
        out.push(fit(&start, lambda)?);
    }
    Ok(out)
}

/// Fit every λ of a strictly descending grid.
pub fn fit_path(data: &Dataset, init: &MixtureParams, lambdas: &[f64], config: &EmConfig) -> Result<Vec<FitResult>> {
    check_init(data, init, config)?;
    let mut start = init.clone();
    start.sigma_y = None;
    start.sigma2 = config.sigma2_mode.initial();
    run_path(
        &start,
        lambdas,
        |p, lambda| {
            let cfg = EmConfig {
                lambda_mode: LambdaMode::Fixed(lambda),
                ..config.clone()
            };
            em_fit(data, p, &cfg)
        },
        |p, lambda| Ok(ascent_objective(loglik(p, data)?, &p.beta, lambda, p.sigma2)),
    )
}

/// `K · (nonzero groups) + (K − 1) + 1`.
pub fn bic_degrees_of_freedom(k: usize, nonzero_groups: usize) -> usize {
    k * nonzero_groups + (k - 1) + 1
}

/// `−2 n · loglik + df · log n`. For a univariate response the likelihood is
/// taken at the responsibility-weighted residual variance of the fit, since
/// `df` counts the variance as a parameter.
pub fn bic(fit: &FitResult, data: &Dataset) -> Result<f64> {
    let mut params = fit.params.clone();
    if data.q() == 1 && params.sigma_y.is_none() {
        let (eta, _) = e_step(&params, data)?;
        let s2 = update_sigma2(&eta, &params, data)?;
        if s2 > 0.0 {
            params.sigma2 = s2;
        }
    }
    let ll = loglik(&params, data)?;
    let n = data.n() as f64;
    let df = bic_degrees_of_freedom(fit.params.k(), fit.params.nonzero_groups()) as f64;
    Ok(-2.0 * n * ll + df * n.ln())
}

/// The path entry with the smallest BIC; ties go to the larger λ.
pub fn bic_select(path: &[FitResult], data: &Dataset) -> Result<FitResult> {
    let mut best: Option<(f64, &FitResult)> = None;
    for fit in path {
        let score = bic(fit, data)?;
        let better = match best {
            None => true,
            Some((b, f)) => score < b || (score == b && fit.lambda > f.lambda),
        };
        if better {
            best = Some((score, fit));
        }
    }
    let (score, fit) = best.ok_or_else(|| Error::InvalidConfig("empty path".into()))?;
    let mut chosen = fit.clone();
    chosen.bic = Some(score);
    Ok(chosen)
}
