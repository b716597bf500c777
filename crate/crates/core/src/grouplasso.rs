//! Groupwise majorization descent for the penalized M-step.
//!
//! Minimises
//!
//! ```text
//! Σ_k tr(β_kᵀ Σ̂_k β_k) − 2 Σ_k tr(ρ̂_kᵀ β_k) + λ Σ_{j,l} ‖((β_1)_{jl}, …, (β_K)_{jl})‖₂
//! ```
//!
//! over K coefficient slices of shape p × q. Each group collects one entry
//! across all mixtures. A group's block Hessian is `diag(2 (Σ̂_k)_{jj})`; it is
//! majorized by `h_j I` with `h_j = 2 max_k (Σ̂_k)_{jj} + 1e-10`, which makes
//! the block update a closed-form group soft-threshold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Added to every majorization constant so empty predictors stay well defined.
const H_EPS: f64 = 1e-10;

/// Read access to the K symmetric PSD slices `Σ̂_k`.
pub trait GramSlices {
    fn n_mixtures(&self) -> usize;
    fn dim(&self) -> usize;
    fn diag(&self, k: usize, j: usize) -> f64;
    /// Writes column `j` of `Σ̂_k` into `out` (length p).
    fn column_into(&self, k: usize, j: usize, out: &mut DVector<f64>);
}

/// Explicit dense slices.
#[derive(Debug, Clone)]
pub struct DenseGram(pub Vec<DMatrix<f64>>);

impl GramSlices for DenseGram {
    fn n_mixtures(&self) -> usize {
        self.0.len()
    }

    fn dim(&self) -> usize {
        self.0[0].nrows()
    }

    fn diag(&self, k: usize, j: usize) -> f64 {
        self.0[k][(j, j)]
    }

    fn column_into(&self, k: usize, j: usize, out: &mut DVector<f64>) {
        out.copy_from(&self.0[k].column(j));
    }
}

/// One M-step instance.
pub struct MStepProblem<'a, G: GramSlices + ?Sized> {
    pub sigma_hat: &'a G,
    pub rho_hat: &'a [DMatrix<f64>],
    pub lambda: f64,
}

impl<'a, G: GramSlices + ?Sized> MStepProblem<'a, G> {
    pub fn new(sigma_hat: &'a G, rho_hat: &'a [DMatrix<f64>], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda = {lambda}")));
        }
        let k = sigma_hat.n_mixtures();
        if k == 0 || rho_hat.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} Gram slices but {} moment slices",
                k,
                rho_hat.len()
            )));
        }
        let p = sigma_hat.dim();
        let q = rho_hat[0].ncols();
        if rho_hat.iter().any(|r| r.shape() != (p, q)) || q == 0 {
            return Err(Error::DimensionMismatch("moment slices must all be p x q".into()));
        }
        Ok(Self {
            sigma_hat,
            rho_hat,
            lambda,
        })
    }

    fn k(&self) -> usize {
        self.rho_hat.len()
    }

    fn p(&self) -> usize {
        self.rho_hat[0].nrows()
    }

    fn q(&self) -> usize {
        self.rho_hat[0].ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop once the largest blockwise KKT violation is at most this.
    pub tol: f64,
    /// Budget in sweeps (full or active-set).
    pub max_iter: usize,
    /// Record the objective after every sweep in [`SolverReport::objective_trace`].
    pub record_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 1000,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub beta: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub final_kkt_gap: f64,
    pub converged: bool,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
}

/// Sum of group norms `Σ_{j,l} ‖((β_1)_{jl}, …, (β_K)_{jl})‖₂`.
pub fn group_norm_sum(beta: &[DMatrix<f64>]) -> f64 {
    let (p, q) = beta[0].shape();
    let mut total = 0.0;
    for l in 0..q {
        for j in 0..p {
            total += beta.iter().map(|b| b[(j, l)].powi(2)).sum::<f64>().sqrt();
        }
    }
    total
}

/// Smallest λ at which β = 0 solves the problem: `max_g ‖2 ρ̂_g‖₂`.
pub fn lambda_max(rho_hat: &[DMatrix<f64>]) -> f64 {
    let (p, q) = rho_hat[0].shape();
    let mut best: f64 = 0.0;
    for l in 0..q {
        for j in 0..p {
            let norm = rho_hat.iter().map(|r| r[(j, l)].powi(2)).sum::<f64>().sqrt();
            best = best.max(2.0 * norm);
        }
    }
    best
}

/// `Σ̂_k β_k` for every k, touching only nonzero rows of β.
fn gram_times<G: GramSlices + ?Sized>(gram: &G, beta: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let (p, q) = beta[0].shape();
    let mut col = DVector::zeros(p);
    beta.iter()
        .enumerate()
        .map(|(k, b)| {
            let mut out = DMatrix::zeros(p, q);
            for j in 0..p {
                if b.row(j).iter().all(|&v| v == 0.0) {
                    continue;
                }
                gram.column_into(k, j, &mut col);
                for l in 0..q {
                    if b[(j, l)] != 0.0 {
                        out.column_mut(l).axpy(b[(j, l)], &col, 1.0);
                    }
                }
            }
            out
        })
        .collect()
}

fn check_beta<G: GramSlices + ?Sized>(problem: &MStepProblem<'_, G>, beta: &[DMatrix<f64>]) -> Result<()> {
    if beta.len() != problem.k() || beta.iter().any(|b| b.shape() != (problem.p(), problem.q())) {
        return Err(Error::DimensionMismatch("coefficients do not match the problem".into()));
    }
    Ok(())
}

fn objective_from(problem_rho: &[DMatrix<f64>], lambda: f64, beta: &[DMatrix<f64>], sb: &[DMatrix<f64>]) -> f64 {
    let smooth: f64 = beta
        .iter()
        .zip(sb)
        .zip(problem_rho)
        .map(|((b, s), r)| b.dot(s) - 2.0 * b.dot(r))
        .sum();
    smooth + lambda * group_norm_sum(beta)
}

/// Value of the M-step objective at `beta`.
pub fn mstep_objective<G: GramSlices + ?Sized>(problem: &MStepProblem<'_, G>, beta: &[DMatrix<f64>]) -> Result<f64> {
    check_beta(problem, beta)?;
    let sb = gram_times(problem.sigma_hat, beta);
    Ok(objective_from(problem.rho_hat, problem.lambda, beta, &sb))
}

/// Largest blockwise violation of the optimality conditions at `beta`.
///
/// Zero groups contribute `max(0, ‖∇_g‖ − λ)`, nonzero groups
/// `‖∇_g + λ β_g / ‖β_g‖‖`, where `∇_g` stacks `2 (Σ̂_k β_k − ρ̂_k)` over k.
pub fn kkt_gap<G: GramSlices + ?Sized>(problem: &MStepProblem<'_, G>, beta: &[DMatrix<f64>]) -> Result<f64> {
    check_beta(problem, beta)?;
    let sb = gram_times(problem.sigma_hat, beta);
    let live = live_mask(problem.sigma_hat, problem.p());
    let mut worst: f64 = 0.0;
    for l in 0..problem.q() {
        for j in 0..problem.p() {
            worst = worst.max(group_violation(problem, beta, &sb, &live[j], j, l));
        }
    }
    Ok(worst)
}

/// Components with a zero diagonal are pinned at zero and excluded from the conditions.
fn live_mask<G: GramSlices + ?Sized>(gram: &G, p: usize) -> Vec<Vec<bool>> {
    (0..p)
        .map(|j| (0..gram.n_mixtures()).map(|k| gram.diag(k, j) > 0.0).collect())
        .collect()
}

fn group_violation<G: GramSlices + ?Sized>(
    problem: &MStepProblem<'_, G>,
    beta: &[DMatrix<f64>],
    sb: &[DMatrix<f64>],
    live: &[bool],
    j: usize,
    l: usize,
) -> f64 {
    let mut bnorm2 = 0.0;
    let mut gnorm2 = 0.0;
    for k in 0..beta.len() {
        if !live[k] {
            continue;
        }
        let g = 2.0 * (sb[k][(j, l)] - problem.rho_hat[k][(j, l)]);
        bnorm2 += beta[k][(j, l)].powi(2);
        gnorm2 += g * g;
    }
    if bnorm2 == 0.0 {
        return (gnorm2.sqrt() - problem.lambda).max(0.0);
    }
    let bnorm = bnorm2.sqrt();
    let mut v2 = 0.0;
    for k in 0..beta.len() {
        if !live[k] {
            continue;
        }
        let g = 2.0 * (sb[k][(j, l)] - problem.rho_hat[k][(j, l)]);
        let v = g + problem.lambda * beta[k][(j, l)] / bnorm;
        v2 += v * v;
    }
    v2.sqrt()
}

struct Gmd<'p, 'a, G: GramSlices + ?Sized> {
    problem: &'p MStepProblem<'a, G>,
    beta: Vec<DMatrix<f64>>,
    /// Σ̂_k β_k, maintained by rank-one column updates.
    sb: Vec<DMatrix<f64>>,
    h: Vec<f64>,
    live: Vec<Vec<bool>>,
    columns: Vec<Option<Vec<DVector<f64>>>>,
    z: Vec<f64>,
}

impl<'p, 'a, G: GramSlices + ?Sized> Gmd<'p, 'a, G> {
    fn new(problem: &'p MStepProblem<'a, G>, mut beta: Vec<DMatrix<f64>>) -> Self {
        let (k, p) = (problem.k(), problem.p());
        let live = live_mask(problem.sigma_hat, p);
        for j in 0..p {
            for c in 0..k {
                if !live[j][c] {
                    beta[c].row_mut(j).fill(0.0);
                }
            }
        }
        let h = (0..p)
            .map(|j| {
                let m = (0..k).map(|c| problem.sigma_hat.diag(c, j)).fold(0.0, f64::max);
                2.0 * m + H_EPS
            })
            .collect();
        let mut solver = Self {
            problem,
            sb: vec![DMatrix::zeros(p, problem.q()); k],
            beta,
            h,
            live,
            columns: vec![None; p],
            z: vec![0.0; k],
        };
        for j in 0..p {
            if solver.beta.iter().any(|b| b.row(j).iter().any(|&v| v != 0.0)) {
                solver.ensure_columns(j);
                let cols = solver.columns[j].as_ref().unwrap();
                for c in 0..k {
                    for l in 0..problem.q() {
                        let b = solver.beta[c][(j, l)];
                        if b != 0.0 {
                            solver.sb[c].column_mut(l).axpy(b, &cols[c], 1.0);
                        }
                    }
                }
            }
        }
        solver
    }

    fn ensure_columns(&mut self, j: usize) {
        if self.columns[j].is_none() {
            let p = self.problem.p();
            let cols = (0..self.problem.k())
                .map(|c| {
                    let mut v = DVector::zeros(p);
                    self.problem.sigma_hat.column_into(c, j, &mut v);
                    v
                })
                .collect();
            self.columns[j] = Some(cols);
        }
    }

    /// Majorized block update of group (j, l); returns whether β changed.
    fn update(&mut self, j: usize, l: usize) -> bool {
        let k = self.problem.k();
        let h = self.h[j];
        let mut znorm2 = 0.0;
        for c in 0..k {
            self.z[c] = if self.live[j][c] {
                let grad = 2.0 * (self.sb[c][(j, l)] - self.problem.rho_hat[c][(j, l)]);
                h * self.beta[c][(j, l)] - grad
            } else {
                0.0
            };
            znorm2 += self.z[c] * self.z[c];
        }
        let znorm = znorm2.sqrt();
        let scale = if h <= H_EPS || znorm <= self.problem.lambda {
            0.0
        } else {
            (1.0 - self.problem.lambda / znorm) / h
        };
        let mut changed = false;
        for c in 0..k {
            let new = self.z[c] * scale;
            let delta = new - self.beta[c][(j, l)];
            if delta != 0.0 {
                changed = true;
                self.beta[c][(j, l)] = new;
                self.ensure_columns(j);
                let col = &self.columns[j].as_ref().unwrap()[c];
                self.sb[c].column_mut(l).axpy(delta, col, 1.0);
            }
        }
        changed
    }

    fn sweep_all(&mut self) {
        for l in 0..self.problem.q() {
            for j in 0..self.problem.p() {
                self.update(j, l);
            }
        }
    }

    fn active_groups(&self) -> Vec<(usize, usize)> {
        let (p, q) = (self.problem.p(), self.problem.q());
        (0..q)
            .flat_map(|l| (0..p).map(move |j| (j, l)))
            .filter(|&(j, l)| self.beta.iter().any(|b| b[(j, l)] != 0.0))
            .collect()
    }

    fn violation(&self, j: usize, l: usize) -> f64 {
        group_violation(self.problem, &self.beta, &self.sb, &self.live[j], j, l)
    }

    fn kkt_all(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 0..self.problem.q() {
            for j in 0..self.problem.p() {
                worst = worst.max(self.violation(j, l));
            }
        }
        worst
    }

    fn objective(&self) -> f64 {
        objective_from(self.problem.rho_hat, self.problem.lambda, &self.beta, &self.sb)
    }
}

/// Largest dimension for which an unpenalized M-step is solved directly.
const DIRECT_MAX_P: usize = 500;

/// `β_k = Σ̂_k⁻¹ ρ̂_k` when λ = 0 and every slice is positive definite.
fn direct_unpenalized<G: GramSlices + ?Sized>(problem: &MStepProblem<'_, G>) -> Option<Vec<DMatrix<f64>>> {
    let p = problem.p();
    if problem.lambda != 0.0 || p > DIRECT_MAX_P {
        return None;
    }
    let mut col = DVector::zeros(p);
    (0..problem.k())
        .map(|k| {
            let mut gram = DMatrix::zeros(p, p);
            for j in 0..p {
                problem.sigma_hat.column_into(k, j, &mut col);
                gram.set_column(j, &col);
            }
            gram.cholesky().map(|c| c.solve(&problem.rho_hat[k]))
        })
        .collect()
}

/// Minimise the M-step objective by cyclic groupwise majorization descent.
///
/// Alternates a full sweep over all groups with repeated sweeps over the
/// current nonzero groups, and stops when the full KKT gap is at most
/// `opts.tol`. At or above [`lambda_max`] the zero solution is returned as is.
/// With λ = 0 the descent starts from the direct solution when that exists.
/// Running out of sweeps is reported through [`SolverReport::converged`], not
/// as an error.
pub fn solve_mstep<G: GramSlices + ?Sized>(
    problem: &MStepProblem<'_, G>,
    warm_start: Option<&[DMatrix<f64>]>,
    opts: &SolverOptions,
) -> Result<SolverReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig(format!("solver tolerance {}", opts.tol)));
    }
    if let Some(b) = warm_start {
        check_beta(problem, b)?;
    }
    if problem.lambda >= lambda_max(problem.rho_hat) {
        return Ok(SolverReport {
            beta: vec![DMatrix::zeros(problem.p(), problem.q()); problem.k()],
            iterations: 0,
            final_kkt_gap: 0.0,
            converged: true,
            objective: 0.0,
            objective_trace: if opts.record_objective { vec![0.0] } else { Vec::new() },
        });
    }
    let start = match direct_unpenalized(problem) {
        Some(b) => b,
        None => match warm_start {
            Some(b) => b.to_vec(),
            None => vec![DMatrix::zeros(problem.p(), problem.q()); problem.k()],
        },
    };
    let mut gmd = Gmd::new(problem, start);
    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(gmd.objective());
    }
    let mut iterations = 0;
    let mut gap = gmd.kkt_all();
    while gap > opts.tol && iterations < opts.max_iter {
        gmd.sweep_all();
        iterations += 1;
        if opts.record_objective {
            trace.push(gmd.objective());
        }
        gap = gmd.kkt_all();
        if gap <= opts.tol {
            break;
        }
        let active = gmd.active_groups();
        while !active.is_empty() && iterations < opts.max_iter {
            for &(j, l) in &active {
                gmd.update(j, l);
            }
            iterations += 1;
            if opts.record_objective {
                trace.push(gmd.objective());
            }
            let active_gap = active.iter().map(|&(j, l)| gmd.violation(j, l)).fold(0.0, f64::max);
            if active_gap <= 0.5 * opts.tol {
                break;
            }
        }
        gap = gmd.kkt_all();
    }
    let objective = gmd.objective();
    Ok(SolverReport {
        beta: gmd.beta,
        iterations,
        final_kkt_gap: gap,
        converged: gap <= opts.tol,
        objective,
        objective_trace: trace,
    })
}
