//! Data and parameter containers, mixture densities and the E-step.
//!
//! Every response is stored as an `n × q` matrix; the univariate model is the
//! `q = 1` case and shares the same density code, with the noise covariance
//! `[σ²]` standing in for `Σ_y`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grouplasso::{group_norm_sum, GramSlices};

/// Tolerance on `Σ ω_k = 1`.
pub const SIMPLEX_TOL: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Predictors `x` (n × p) paired with responses `y` (n × q).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "need at least 2 observations, got {}",
                x.nrows()
            )));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::DimensionMismatch("empty predictor or response".into()));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("x[{}, {}]", pos % x.nrows(), pos / x.nrows())));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("y[{}, {}]", pos % y.nrows(), pos / y.nrows())));
        }
        Ok(Self { x, y })
    }

    pub fn univariate(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(x, DMatrix::from_column_slice(n, 1, y.as_slice()))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Restrict to the given predictor columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::DimensionMismatch("no columns selected".into()));
        }
        Ok(Self {
            x: self.x.select_columns(cols),
            y: self.y.clone(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.x.select_rows(rows), self.y.select_rows(rows))
    }

    /// The dataset with only response column `l`.
    pub fn response_column(&self, l: usize) -> Self {
        Self {
            x: self.x.clone(),
            y: self.y.columns(l, 1).into_owned(),
        }
    }

    pub fn with_response(&self, y: DMatrix<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y)
    }
}

/// Mixing weights, per-mixture coefficients and the noise scale.
///
/// `sigma_y`, when present, is the response noise covariance and takes
/// precedence over `sigma2`; otherwise the noise covariance is `σ² I_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub omega: DVector<f64>,
    pub beta: Vec<DMatrix<f64>>,
    pub sigma2: f64,
    pub sigma_y: Option<DMatrix<f64>>,
}

impl MixtureParams {
    pub fn new(omega: DVector<f64>, beta: Vec<DMatrix<f64>>, sigma2: f64) -> Result<Self> {
        let params = Self {
            omega,
            beta,
            sigma2,
            sigma_y: None,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_sigma_y(mut self, sigma_y: DMatrix<f64>) -> Result<Self> {
        self.sigma_y = Some(sigma_y);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.omega.len();
        if k == 0 || self.beta.len() != k {
            return Err(Error::InvalidParams(format!(
                "{} mixing weights but {} coefficient slices",
                k,
                self.beta.len()
            )));
        }
        if self.omega.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParams("mixing weights must be positive".into()));
        }
        let total: f64 = self.omega.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidParams(format!("mixing weights sum to {total}")));
        }
        let (p, q) = self.beta[0].shape();
        for b in &self.beta {
            if b.shape() != (p, q) {
                return Err(Error::InvalidParams("coefficient slices differ in shape".into()));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coefficient entry".into()));
            }
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::InvalidParams(format!("sigma2 = {}", self.sigma2)));
        }
        if let Some(s) = &self.sigma_y {
            if s.shape() != (q, q) {
                return Err(Error::InvalidParams(format!(
                    "sigma_y is {}x{}, expected {q}x{q}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            if (s - s.transpose()).abs().max() > 1e-10 * s.abs().max().max(1.0) {
                return Err(Error::InvalidParams("sigma_y is not symmetric".into()));
            }
            if s.clone().cholesky().is_none() {
                return Err(Error::SingularCovariance);
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }

    pub fn p(&self) -> usize {
        self.beta[0].nrows()
    }

    pub fn q(&self) -> usize {
        self.beta[0].ncols()
    }

    /// Mixture `k` of the result is mixture `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            omega: DVector::from_iterator(perm.len(), perm.iter().map(|&k| self.omega[k])),
            beta: perm.iter().map(|&k| self.beta[k].clone()).collect(),
            sigma2: self.sigma2,
            sigma_y: self.sigma_y.clone(),
        }
    }

    /// Frobenius distance between the stacked coefficient slices.
    pub fn beta_distance(&self, other: &Self) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Predictor indices with a nonzero coefficient in any mixture.
    pub fn support(&self) -> Vec<usize> {
        support_of(&self.beta)
    }

    /// Number of `(j, l)` groups that are nonzero in at least one mixture.
    pub fn nonzero_groups(&self) -> usize {
        let (p, q) = self.beta[0].shape();
        (0..p)
            .flat_map(|j| (0..q).map(move |l| (j, l)))
            .filter(|&(j, l)| self.beta.iter().any(|b| b[(j, l)] != 0.0))
            .count()
    }

    /// Copy with coefficient rows placed at `rows` of a `p_full`-row matrix, zeros elsewhere.
    pub fn embed_rows(&self, rows: &[usize], p_full: usize) -> Self {
        let q = self.q();
        let beta = self
            .beta
            .iter()
            .map(|b| {
                let mut full = DMatrix::zeros(p_full, q);
                for (r, &j) in rows.iter().enumerate() {
                    full.row_mut(j).copy_from(&b.row(r));
                }
                full
            })
            .collect();
        Self {
            omega: self.omega.clone(),
            beta,
            sigma2: self.sigma2,
            sigma_y: self.sigma_y.clone(),
        }
    }

    pub fn restrict_rows(&self, rows: &[usize]) -> Self {
        Self {
            omega: self.omega.clone(),
            beta: self.beta.iter().map(|b| b.select_rows(rows)).collect(),
            sigma2: self.sigma2,
            sigma_y: self.sigma_y.clone(),
        }
    }

    /// Keep only response column `l`; any response covariance is reduced to its `(l, l)` entry.
    pub fn restrict_columns(&self, l: usize) -> Self {
        let sigma2 = self.sigma_y.as_ref().map_or(self.sigma2, |s| s[(l, l)]);
        Self {
            omega: self.omega.clone(),
            beta: self.beta.iter().map(|b| b.columns(l, 1).into_owned()).collect(),
            sigma2,
            sigma_y: None,
        }
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if self.p() != data.p() || self.q() != data.q() {
            return Err(Error::DimensionMismatch(format!(
                "parameters are {}x{} per mixture but data has p={}, q={}",
                self.p(),
                self.q(),
                data.p(),
                data.q()
            )));
        }
        Ok(())
    }
}

pub(crate) fn support_of(beta: &[DMatrix<f64>]) -> Vec<usize> {
    let p = beta[0].nrows();
    (0..p)
        .filter(|&j| beta.iter().any(|b| b.row(j).iter().any(|&v| v != 0.0)))
        .collect()
}

/// Posterior mixture probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    eta: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(eta: DMatrix<f64>) -> Result<Self> {
        if eta.ncols() == 0 || eta.nrows() == 0 {
            return Err(Error::DimensionMismatch("empty responsibility matrix".into()));
        }
        for (i, row) in eta.row_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidParams(format!("row {i} has entries outside [0, 1]")));
            }
            if (row.sum() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParams(format!("row {i} does not sum to one")));
            }
        }
        Ok(Self { eta })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.eta
    }

    pub fn n(&self) -> usize {
        self.eta.nrows()
    }

    pub fn k(&self) -> usize {
        self.eta.ncols()
    }
}

/// Cholesky factor of the noise covariance used by the Gaussian log-density.
pub(crate) struct NoiseCov {
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl NoiseCov {
    pub(crate) fn of(params: &MixtureParams) -> Result<Self> {
        let q = params.q();
        let chol = match &params.sigma_y {
            Some(s) => s.clone().cholesky().ok_or(Error::SingularCovariance)?.l(),
            None => DMatrix::from_diagonal_element(q, q, params.sigma2.sqrt()),
        };
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            chol,
            log_norm: -0.5 * (q as f64 * LN_2PI + log_det),
        })
    }

    /// `log φ(r)` for a residual row `r` of length q.
    fn log_density(&self, r: &mut [f64]) -> f64 {
        // Forward substitution L z = r, in place.
        let q = r.len();
        let mut quad = 0.0;
        for a in 0..q {
            let mut v = r[a];
            for b in 0..a {
                v -= self.chol[(a, b)] * r[b];
            }
            v /= self.chol[(a, a)];
            r[a] = v;
            quad += v * v;
        }
        self.log_norm - 0.5 * quad
    }
}

/// `x β` using only the nonzero rows of `β`.
pub(crate) fn fitted(x: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = (x.nrows(), beta.ncols());
    let mut out = DMatrix::zeros(n, q);
    for j in 0..beta.nrows() {
        let xj = x.column(j);
        for l in 0..q {
            let b = beta[(j, l)];
            if b != 0.0 {
                out.column_mut(l).axpy(b, &xj, 1.0);
            }
        }
    }
    out
}

/// `log ω_k + log φ(y_i − β_kᵀ x_i)` for every observation and mixture.
fn log_joint(params: &MixtureParams, data: &Dataset) -> Result<DMatrix<f64>> {
    params.validate()?;
    params.check_data(data)?;
    let noise = NoiseCov::of(params)?;
    let (n, q, k) = (data.n(), data.q(), params.k());
    let mut logits = DMatrix::zeros(n, k);
    let mut buf = vec![0.0; q];
    for c in 0..k {
        let resid = data.y() - fitted(data.x(), &params.beta[c]);
        let log_w = params.omega[c].ln();
        for i in 0..n {
            for (l, slot) in buf.iter_mut().enumerate() {
                *slot = resid[(i, l)];
            }
            let v = log_w + noise.log_density(&mut buf);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-density of observation {i} under mixture {c}"
                )));
            }
            logits[(i, c)] = v;
        }
    }
    Ok(logits)
}

/// Row-normalises `logits` in place into probabilities; returns Σ_i log Σ_k exp(logit).
fn normalize_rows(logits: &mut DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for mut row in logits.row_iter_mut() {
        let m = row.max();
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row /= s;
        total += m + s.ln();
    }
    total
}

/// E-step returning the responsibilities and the average conditional log-likelihood.
pub(crate) fn e_step(params: &MixtureParams, data: &Dataset) -> Result<(Responsibilities, f64)> {
    let mut logits = log_joint(params, data)?;
    let total = normalize_rows(&mut logits);
    Ok((Responsibilities { eta: logits }, total / data.n() as f64))
}

/// Posterior probability that each observation came from each mixture.
///
/// Evaluated in log space with a per-row log-sum-exp, so arbitrarily large
/// logits do not overflow.
pub fn responsibilities(params: &MixtureParams, data: &Dataset) -> Result<Responsibilities> {
    e_step(params, data).map(|(eta, _)| eta)
}

/// Average conditional log-likelihood `(1/n) Σ_i log Σ_k ω_k φ(y_i − β_kᵀ x_i)`.
pub fn loglik(params: &MixtureParams, data: &Dataset) -> Result<f64> {
    e_step(params, data).map(|(_, ll)| ll)
}

/// `loglik − (λ/2) Σ_{j,l} ‖((β_1)_{jl}, …, (β_K)_{jl})‖₂`.
pub fn penalized_loglik(params: &MixtureParams, data: &Dataset, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda = {lambda}")));
    }
    Ok(loglik(params, data)? - 0.5 * lambda * group_norm_sum(&params.beta))
}

/// Weighted sufficient statistics of one M-step.
#[derive(Debug, Clone)]
pub struct WeightedMoments<'a> {
    pub omega_hat: DVector<f64>,
    /// `(1/n) Σ_i η_ik x_i y_iᵀ`, right-multiplied by `Σ_y⁻¹` when one was supplied.
    pub rho_hat: Vec<DMatrix<f64>>,
    pub sigma_hat: WeightedGram<'a>,
}

/// The slices `Σ̂_k = (1/n) Σ_i η_ik x_i x_iᵀ`, held implicitly.
///
/// Columns are computed on demand from the weighted design, which keeps the
/// cost of an M-step proportional to the number of active predictors rather
/// than `p²`.
#[derive(Debug, Clone)]
pub struct WeightedGram<'a> {
    x: &'a DMatrix<f64>,
    /// `η / n`, n × K.
    weights: DMatrix<f64>,
    /// Diagonals, p × K.
    diag: DMatrix<f64>,
}

impl<'a> WeightedGram<'a> {
    pub fn new(x: &'a DMatrix<f64>, eta: &DMatrix<f64>) -> Self {
        let weights = eta / x.nrows() as f64;
        let x_sq = x.component_mul(x);
        let diag = x_sq.tr_mul(&weights);
        Self { x, weights, diag }
    }

    /// Materialise `Σ̂_k` as a dense p × p matrix.
    pub fn dense(&self, k: usize) -> DMatrix<f64> {
        let mut scaled = self.x.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.weights[(i, k)];
        }
        self.x.tr_mul(&scaled)
    }
}

impl GramSlices for WeightedGram<'_> {
    fn n_mixtures(&self) -> usize {
        self.weights.ncols()
    }

    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn diag(&self, k: usize, j: usize) -> f64 {
        self.diag[(j, k)]
    }

    fn column_into(&self, k: usize, j: usize, out: &mut DVector<f64>) {
        let v = self.x.column(j).component_mul(&self.weights.column(k));
        out.gemv_tr(1.0, self.x, &v, 0.0);
    }
}

/// Weighted moments `(ω̂_k, ρ̂_k, Σ̂_k)` of the M-step.
///
/// With `sigma_y` given, `ρ̂_k` is right-multiplied by `Σ_y⁻¹` through a
/// Cholesky solve.
pub fn weighted_moments<'a>(
    eta: &Responsibilities,
    data: &'a Dataset,
    sigma_y: Option<&DMatrix<f64>>,
) -> Result<WeightedMoments<'a>> {
    if eta.n() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "responsibilities have {} rows but data has {}",
            eta.n(),
            data.n()
        )));
    }
    let n = data.n() as f64;
    let k = eta.k();
    let omega_hat = DVector::from_iterator(k, eta.eta.column_iter().map(|c| c.sum() / n));
    let chol = match sigma_y {
        Some(s) => {
            if s.shape() != (data.q(), data.q()) {
                return Err(Error::DimensionMismatch("sigma_y does not match q".into()));
            }
            Some(s.clone().cholesky().ok_or(Error::SingularCovariance)?)
        }
        None => None,
    };
    let mut rho_hat = Vec::with_capacity(k);
    for c in 0..k {
        let mut wy = data.y().clone();
        for (i, mut row) in wy.row_iter_mut().enumerate() {
            row *= eta.eta[(i, c)] / n;
        }
        let rho = data.x().tr_mul(&wy);
        let rho = match &chol {
            // ρ Σ⁻¹ = (Σ⁻¹ ρᵀ)ᵀ
            Some(ch) => ch.solve(&rho.transpose()).transpose(),
            None => rho,
        };
        rho_hat.push(rho);
    }
    Ok(WeightedMoments {
        omega_hat,
        rho_hat,
        sigma_hat: WeightedGram::new(data.x(), &eta.eta),
    })
}

/// `(1/n) Σ_i Σ_k η_ik (y_i − x_iᵀ β_k)²` for a univariate response.
pub fn update_sigma2(eta: &Responsibilities, params: &MixtureParams, data: &Dataset) -> Result<f64> {
    if data.q() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "variance update needs a univariate response, got q = {}",
            data.q()
        )));
    }
    params.check_data(data)?;
    if eta.n() != data.n() || eta.k() != params.k() {
        return Err(Error::DimensionMismatch("responsibilities do not match".into()));
    }
    let mut total = 0.0;
    for c in 0..params.k() {
        let resid = data.y() - fitted(data.x(), &params.beta[c]);
        total += resid
            .iter()
            .zip(eta.eta.column(c).iter())
            .map(|(r, w)| w * r * r)
            .sum::<f64>();
    }
    let s2 = total / data.n() as f64;
    if !(s2 > 0.0) {
        return Err(Error::DegenerateFit);
    }
    Ok(s2)
}

/// Per-row argmax as 1-based mixture labels; ties go to the lowest index.
pub fn assign_labels(eta: &Responsibilities) -> Vec<usize> {
    eta.eta
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best + 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, p: usize, k: usize) -> (MixtureParams, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let beta = (0..k)
            .map(|_| DMatrix::from_fn(p, 1, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let sigma2 = rng.random_range(0.3..2.0);
        (
            MixtureParams::new(DVector::from_vec(w), beta, sigma2).unwrap(),
            Dataset::univariate(x, y).unwrap(),
        )
    }

    /// Direct normal-density quotient, no log-space tricks.
    fn eta_oracle(params: &MixtureParams, data: &Dataset) -> DMatrix<f64> {
        let (n, k) = (data.n(), params.k());
        let s2 = params.sigma2;
        DMatrix::from_fn(n, k, |i, c| {
            let dens = |cc: usize| {
                let mu: f64 = (0..data.p()).map(|j| data.x()[(i, j)] * params.beta[cc][(j, 0)]).sum();
                let r = data.y()[(i, 0)] - mu;
                params.omega[cc] * (-(r * r) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
            };
            dens(c) / (0..k).map(dens).sum::<f64>()
        })
    }

    #[test]
    fn identical_mixtures_split_evenly() {
        let (mut params, data) = random_instance(3, 7, 3, 2);
        params.beta[1] = params.beta[0].clone();
        params.omega = DVector::from_vec(vec![0.5, 0.5]);
        let eta = responsibilities(&params, &data).unwrap();
        assert!(eta.matrix().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_mixture_is_all_ones() {
        let (_, data) = random_instance(4, 6, 2, 1);
        let params = MixtureParams::new(
            DVector::from_element(1, 1.0),
            vec![DMatrix::from_element(2, 1, 0.7)],
            1.3,
        )
        .unwrap();
        let eta = responsibilities(&params, &data).unwrap();
        assert!(eta.matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn responsibilities_match_density_quotient() {
        for seed in 0..5 {
            let (params, data) = random_instance(seed, 3, 2, 2);
            let eta = responsibilities(&params, &data).unwrap();
            let oracle = eta_oracle(&params, &data);
            assert!((eta.matrix() - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn pairwise_logit_form_agrees() {
        // η_ik = ω_k / (ω_k + Σ_{k'≠k} ω_k' exp{(β_k' − β_k)ᵀx (y − (β_k + β_k')ᵀx/2) / σ²})
        let (params, data) = random_instance(11, 5, 3, 3);
        let eta = responsibilities(&params, &data).unwrap();
        for i in 0..data.n() {
            let xi = data.x().row(i).transpose();
            let yi = data.y()[(i, 0)];
            for c in 0..3 {
                let bc = params.beta[c].column(0);
                let mut denom = params.omega[c];
                for o in (0..3).filter(|&o| o != c) {
                    let bo = params.beta[o].column(0);
                    let d = (bo - bc).dot(&xi);
                    let mid = (bc + bo).dot(&xi) / 2.0;
                    denom += params.omega[o] * (d * (yi - mid) / params.sigma2).exp();
                }
                assert!((eta.matrix()[(i, c)] - params.omega[c] / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (mut params, data) = random_instance(5, 20, 4, 3);
        for b in params.beta.iter_mut() {
            *b *= 50.0;
        }
        let eta = responsibilities(&params, &data).unwrap();
        for row in eta.matrix().row_iter() {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn loglik_standard_normal_at_zero() {
        let x = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 2.0, 1.0, 1.0, 1.0]);
        let data = Dataset::univariate(x, DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let params = MixtureParams::new(DVector::from_element(1, 1.0), vec![DMatrix::zeros(3, 1)], 1.0).unwrap();
        let ll = loglik(&params, &data).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn loglik_is_per_sample_average() {
        let (params, data) = random_instance(6, 8, 3, 2);
        let doubled = Dataset::new(
            DMatrix::from_fn(16, 3, |i, j| data.x()[(i % 8, j)]),
            DMatrix::from_fn(16, 1, |i, _| data.y()[(i % 8, 0)]),
        )
        .unwrap();
        let a = loglik(&params, &data).unwrap();
        let b = loglik(&params, &doubled).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn loglik_matches_direct_sum() {
        for seed in 20..25 {
            let (params, data) = random_instance(seed, 6, 3, 2);
            let s2 = params.sigma2;
            let direct: f64 = (0..data.n())
                .map(|i| {
                    (0..2)
                        .map(|c| {
                            let mu: f64 = (0..3).map(|j| data.x()[(i, j)] * params.beta[c][(j, 0)]).sum();
                            let r = data.y()[(i, 0)] - mu;
                            params.omega[c] * (-(r * r) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
                        })
                        .sum::<f64>()
                        .ln()
                })
                .sum::<f64>()
                / data.n() as f64;
            assert!((loglik(&params, &data).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_uses_cross_mixture_group_norms() {
        let (_, data) = random_instance(7, 5, 2, 2);
        let beta = vec![
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        ];
        // group 1: (1, 1) → √2; group 2: (1, 0) → 1
        let params = MixtureParams::new(DVector::from_vec(vec![0.4, 0.6]), beta, 1.0).unwrap();
        let ll = loglik(&params, &data).unwrap();
        let pl = penalized_loglik(&params, &data, 2.0).unwrap();
        assert!((pl - (ll - (2f64.sqrt() + 1.0))).abs() < 1e-12);
        assert_eq!(penalized_loglik(&params, &data, 0.0).unwrap(), ll);
    }

    #[test]
    fn penalty_vanishes_at_origin() {
        let (mut params, data) = random_instance(8, 5, 3, 2);
        params.beta.iter_mut().for_each(|b| b.fill(0.0));
        let ll = loglik(&params, &data).unwrap();
        assert_eq!(penalized_loglik(&params, &data, 123.0).unwrap(), ll);
    }

    #[test]
    fn moments_reduce_to_least_squares_statistics() {
        let (_, data) = random_instance(9, 10, 3, 1);
        let eta = Responsibilities::new(DMatrix::from_element(10, 1, 1.0)).unwrap();
        let m = weighted_moments(&eta, &data, None).unwrap();
        assert_eq!(m.omega_hat[0], 1.0);
        let xty = data.x().tr_mul(data.y()) / 10.0;
        let xtx = data.x().tr_mul(data.x()) / 10.0;
        assert!((&m.rho_hat[0] - xty).abs().max() < 1e-12);
        assert!((m.sigma_hat.dense(0) - xtx).abs().max() < 1e-12);
    }

    #[test]
    fn moments_match_hand_sums() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0, 2.0, -2.0]);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let data = Dataset::univariate(x.clone(), y.clone()).unwrap();
        let eta = Responsibilities::new(DMatrix::from_row_slice(
            4,
            2,
            &[0.25, 0.75, 1.0, 0.0, 0.5, 0.5, 0.1, 0.9],
        ))
        .unwrap();
        let m = weighted_moments(&eta, &data, None).unwrap();
        for c in 0..2 {
            let mut w = 0.0;
            let mut rho = [0.0; 2];
            let mut sig = [[0.0; 2]; 2];
            for i in 0..4 {
                let e = eta.matrix()[(i, c)];
                w += e;
                for a in 0..2 {
                    rho[a] += e * x[(i, a)] * y[i];
                    for b in 0..2 {
                        sig[a][b] += e * x[(i, a)] * x[(i, b)];
                    }
                }
            }
            assert!((m.omega_hat[c] - w / 4.0).abs() < 1e-12);
            let dense = m.sigma_hat.dense(c);
            for a in 0..2 {
                assert!((m.rho_hat[c][(a, 0)] - rho[a] / 4.0).abs() < 1e-12);
                assert!((m.sigma_hat.diag(c, a) - sig[a][a] / 4.0).abs() < 1e-12);
                for b in 0..2 {
                    assert!((dense[(a, b)] - sig[a][b] / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn moments_partition_the_gram_matrix() {
        let (params, data) = random_instance(10, 12, 4, 3);
        let eta = responsibilities(&params, &data).unwrap();
        let m = weighted_moments(&eta, &data, None).unwrap();
        assert!((m.omega_hat.sum() - 1.0).abs() < 1e-12);
        let total = (0..3).fold(DMatrix::zeros(4, 4), |acc, c| acc + m.sigma_hat.dense(c));
        let xtx = data.x().tr_mul(data.x()) / 12.0;
        assert!((total - xtx).abs().max() < 1e-12);
    }

    #[test]
    fn moments_apply_noise_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let data = Dataset::new(x, y).unwrap();
        let eta = Responsibilities::new(DMatrix::from_element(6, 1, 1.0)).unwrap();
        let sy = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let plain = weighted_moments(&eta, &data, None).unwrap();
        let scaled = weighted_moments(&eta, &data, Some(&sy)).unwrap();
        let expected = &plain.rho_hat[0] * sy.try_inverse().unwrap();
        assert!((&scaled.rho_hat[0] - expected).abs().max() < 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            weighted_moments(&eta, &data, Some(&singular)),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn sigma2_null_model_is_mean_square() {
        let (_, data) = random_instance(13, 9, 2, 1);
        let params = MixtureParams::new(DVector::from_element(1, 1.0), vec![DMatrix::zeros(2, 1)], 1.0).unwrap();
        let eta = responsibilities(&params, &data).unwrap();
        let s2 = update_sigma2(&eta, &params, &data).unwrap();
        let ms = data.y().iter().map(|v| v * v).sum::<f64>() / 9.0;
        assert!((s2 - ms).abs() < 1e-12);
    }

    #[test]
    fn sigma2_exact_fit_is_degenerate() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let beta = DMatrix::from_column_slice(2, 1, &[2.0, -1.0]);
        let y = &x * &beta;
        let data = Dataset::new(x, y).unwrap();
        let params = MixtureParams::new(DVector::from_element(1, 1.0), vec![beta], 1.0).unwrap();
        let eta = responsibilities(&params, &data).unwrap();
        assert!(matches!(update_sigma2(&eta, &params, &data), Err(Error::DegenerateFit)));
    }

    #[test]
    fn sigma2_matches_hand_weighted_mean() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 2.0]);
        let data = Dataset::univariate(x, y).unwrap();
        let params = MixtureParams::new(
            DVector::from_vec(vec![0.5, 0.5]),
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)],
            1.0,
        )
        .unwrap();
        let eta = Responsibilities::new(DMatrix::from_row_slice(3, 2, &[0.2, 0.8, 0.6, 0.4, 0.5, 0.5])).unwrap();
        // residuals under β=1: 0, -2, 3; under β=-1: 2, 2, 1
        let expected = (0.2 * 0.0 + 0.8 * 4.0 + 0.6 * 4.0 + 0.4 * 4.0 + 0.5 * 9.0 + 0.5 * 1.0) / 3.0;
        assert!((update_sigma2(&eta, &params, &data).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn labels_take_lowest_index_on_ties() {
        let eta = Responsibilities::new(DMatrix::from_row_slice(3, 2, &[0.7, 0.3, 0.5, 0.5, 0.2, 0.8])).unwrap();
        assert_eq!(assign_labels(&eta), vec![1, 1, 2]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(Dataset::new(DMatrix::zeros(3, 2), DMatrix::zeros(4, 1)).is_err());
        assert!(Dataset::new(DMatrix::from_element(3, 1, f64::NAN), DMatrix::zeros(3, 1)).is_err());
        assert!(MixtureParams::new(DVector::from_vec(vec![0.5, 0.6]), vec![DMatrix::zeros(1, 1); 2], 1.0).is_err());
        assert!(MixtureParams::new(DVector::from_vec(vec![1.0]), vec![DMatrix::zeros(1, 1)], 0.0).is_err());
        let (params, _) = random_instance(1, 4, 3, 2);
        let other = Dataset::univariate(DMatrix::zeros(4, 2), DVector::zeros(4)).unwrap();
        assert!(matches!(
            responsibilities(&params, &other),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
