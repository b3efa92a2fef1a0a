//! Pairwise Gaussian composite likelihood for one block of coordinates:
//! log-density, log-CL, mean scores, sensitivity and the per-block MCLE.
//!
//! All functions use the identity link, so coordinate r of subject i has
//! mean `x_{ir}ᵀβ`. Pair (r, t) has covariance σ²[[1, c], [c, 1]] with c the
//! structure's correlation at lag |r − t|.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{DimmError, Result};
use crate::model::{DependenceKind, PairCovariance, PanelDataset, Structure};
use crate::optim::{bfgs, nelder_mead, BfgsOptions, NelderMeadOptions};

/// log of the bivariate normal density N(mu, Ω) at y.
pub fn bivariate_normal_logpdf(y: [f64; 2], mu: [f64; 2], omega: &PairCovariance) -> f64 {
    let (a, b) = omega.inverse_entries();
    let e0 = y[0] - mu[0];
    let e1 = y[1] - mu[1];
    let quad = a * (e0 * e0 + e1 * e1) + 2.0 * b * e0 * e1;
    -(2.0 * PI).ln() - 0.5 * omega.log_det() - 0.5 * quad
}

fn linear_predictor(row: &[f64], beta: &[f64]) -> f64 {
    row.iter().zip(beta).map(|(x, b)| x * b).sum()
}

fn check_beta(beta: &[f64], data: &PanelDataset) -> Result<()> {
    if beta.len() != data.n_covariates() {
        return Err(DimmError::Domain(format!(
            "beta has length {} but the data has {} covariates",
            beta.len(),
            data.n_covariates()
        )));
    }
    Ok(())
}

/// Residual vector yᵢ − Xᵢβ for subject `i`.
fn residuals(data: &PanelDataset, i: usize, beta: &[f64]) -> Vec<f64> {
    data.response(i).iter().enumerate().map(|(r, y)| y - linear_predictor(data.covariate_row(i, r), beta)).collect()
}

/// Ω⁻¹ entries (a, b) indexed by lag; index 0 unused.
fn inverse_entries_by_lag(gamma: &DependenceKind, m: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = vec![(0.0, 0.0); m];
    for (lag, slot) in out.iter_mut().enumerate().skip(1) {
        *slot = gamma.pair_covariance(lag)?.inverse_entries();
    }
    Ok(out)
}

/// Block log composite likelihood: the sum over subjects and all coordinate
/// pairs r < t of the bivariate normal log-density.
pub fn block_logcl(beta: &[f64], gamma: &DependenceKind, data: &PanelDataset) -> Result<f64> {
    check_beta(beta, data)?;
    let m = data.response_dim();
    gamma.validate(m)?;
    let omegas: Vec<PairCovariance> = (1..m).map(|lag| gamma.pair_covariance(lag)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..data.n_subjects() {
        let y = data.response(i);
        let mu: Vec<f64> = (0..m).map(|r| linear_predictor(data.covariate_row(i, r), beta)).collect();
        for r in 0..m - 1 {
            for t in r + 1..m {
                total += bivariate_normal_logpdf([y[r], y[t]], [mu[r], mu[t]], &omegas[t - r - 1]);
            }
        }
    }
    Ok(total)
}

/// Per-subject β-scores ψ(β; yᵢ, γ) as the rows of an N×p matrix.
pub fn block_score_beta(beta: &[f64], gamma: &DependenceKind, data: &PanelDataset) -> Result<DMatrix<f64>> {
    check_beta(beta, data)?;
    let (n, m, p) = (data.n_subjects(), data.response_dim(), data.n_covariates());
    gamma.validate(m)?;
    let inv = inverse_entries_by_lag(gamma, m)?;
    let mut scores = DMatrix::zeros(n, p);
    let mut weight = vec![0.0; m];
    for i in 0..n {
        let e = residuals(data, i, beta);
        // coefficient on x_r: Σ_{t≠r} (a e_r + b e_t)
        for r in 0..m {
            let mut w = 0.0;
            for t in 0..m {
                if t != r {
                    let (a, b) = inv[r.abs_diff(t)];
                    w += a * e[r] + b * e[t];
                }
            }
            weight[r] = w;
        }
        for (r, w) in weight.iter().enumerate() {
            for (k, x) in data.covariate_row(i, r).iter().enumerate() {
                scores[(i, k)] += w * x;
            }
        }
    }
    Ok(scores)
}

/// Mean β-score (1/N) Σᵢ ψ(β; yᵢ, γ).
pub fn block_mean_score(beta: &[f64], gamma: &DependenceKind, data: &PanelDataset) -> Result<DVector<f64>> {
    let scores = block_score_beta(beta, gamma, data)?;
    Ok(scores.row_mean().transpose())
}

/// Sensitivity (1/N) Σᵢ Σ_{r<t} X_pairᵀ Ω⁻¹ X_pair. It does not depend on β
/// under the identity link; `beta` is accepted for interface symmetry.
pub fn block_sensitivity(beta: &[f64], gamma: &DependenceKind, data: &PanelDataset) -> Result<DMatrix<f64>> {
    check_beta(beta, data)?;
    let (n, m, p) = (data.n_subjects(), data.response_dim(), data.n_covariates());
    gamma.validate(m)?;
    let inv = inverse_entries_by_lag(gamma, m)?;
    // W_rr = Σ_{t≠r} a_lag, W_rt = b_lag, so the sum equals Σᵢ Xᵢᵀ W Xᵢ
    let w = DMatrix::from_fn(m, m, |r, t| {
        if r == t {
            (0..m).filter(|&u| u != r).map(|u| inv[r.abs_diff(u)].0).sum()
        } else {
            inv[r.abs_diff(t)].1
        }
    });
    let mut acc = DMatrix::zeros(p, p);
    for i in 0..n {
        let x = data.covariate_matrix(i);
        acc += x.transpose() * (&w * &x);
    }
    acc /= n as f64;
    Ok((&acc + acc.transpose()) * 0.5)
}

/// Maps the unconstrained pair θ = (log σ, θ_ρ) to (σ, ρ) for a structure.
#[derive(Debug, Clone, Copy)]
pub struct GammaMap {
    structure: Structure,
    lower: f64,
    upper: f64,
}

impl GammaMap {
    pub fn new(structure: Structure, m: usize) -> Self {
        let (lower, upper) = structure.rho_bounds(m);
        Self { structure, lower, upper }
    }

    pub fn to_gamma(&self, theta: [f64; 2]) -> DependenceKind {
        let sigma = theta[0].exp();
        let rho = self.lower + (self.upper - self.lower) * (theta[1].tanh() + 1.0) / 2.0;
        self.structure.with_params(sigma, rho)
    }

    pub fn to_theta(&self, gamma: &DependenceKind) -> [f64; 2] {
        let u = 2.0 * (gamma.rho() - self.lower) / (self.upper - self.lower) - 1.0;
        [gamma.sigma().ln(), u.atanh()]
    }

    /// (dσ/dθ₁, dρ/dθ₂).
    pub fn jacobian(&self, theta: [f64; 2]) -> [f64; 2] {
        let sech2 = 1.0 - theta[1].tanh().powi(2);
        [theta[0].exp(), (self.upper - self.lower) / 2.0 * sech2]
    }
}

const MAX_PRECONDITION_ROUNDS: usize = 5;

fn fd_step(theta: f64) -> f64 {
    1e-6 * theta.abs().max(1.0)
}

/// Gradient (∂/∂σ, ∂/∂ρ) of the mean log-CL (1/N)·cℓ by central differences
/// in the unconstrained θ parameterization, mapped back by the chain rule.
pub fn block_score_gamma(beta: &[f64], gamma: &DependenceKind, data: &PanelDataset) -> Result<[f64; 2]> {
    let m = data.response_dim();
    gamma.validate(m)?;
    let map = GammaMap::new(gamma.structure(), m);
    let theta = map.to_theta(gamma);
    let n = data.n_subjects() as f64;
    let mut dtheta = [0.0; 2];
    for k in 0..2 {
        let mut h = fd_step(theta[k]);
        // θ is unconstrained, but tanh saturates near |ρ| → bounds; halve
        // the step until both probes map to valid parameters.
        let (plus, minus) = loop {
            let mut tp = theta;
            let mut tm = theta;
            tp[k] += h;
            tm[k] -= h;
            let gp = map.to_gamma(tp);
            let gm = map.to_gamma(tm);
            if (gp.validate(m).is_ok() && gm.validate(m).is_ok()) || h < 1e-14 {
                break (gp, gm);
            }
            h *= 0.5;
        };
        let fp = block_logcl(beta, &plus, data)? / n;
        let fm = block_logcl(beta, &minus, data)? / n;
        dtheta[k] = (fp - fm) / (2.0 * h);
    }
    let jac = map.jacobian(theta);
    Ok([dtheta[0] / jac[0], dtheta[1] / jac[1]])
}

#[derive(Debug, Clone)]
struct LagGroup {
    /// lag used to evaluate the correlation of this group
    lag: usize,
    count: f64,
    // Q(δ) = Σ (e_r² + e_t²) = sq0 − 2 sq_lin·δ + δᵀ sq_quad δ
    sq0: f64,
    sq_lin: DVector<f64>,
    sq_quad: DMatrix<f64>,
    // C(δ) = Σ e_r e_t = cr0 − cr_lin·δ + δᵀ cr_quad δ
    cr0: f64,
    cr_lin: DVector<f64>,
    cr_quad: DMatrix<f64>,
}

/// Pair-level sufficient statistics of a block around a reference β, so the
/// log-CL and its β-gradient cost O(m p²) per evaluation instead of a pass
/// over all subjects and pairs.
#[derive(Debug, Clone)]
pub struct PairMoments {
    beta_ref: DVector<f64>,
    groups: Vec<LagGroup>,
    n_subjects: usize,
    pairs_per_subject: usize,
    m: usize,
}

impl PairMoments {
    pub fn new(data: &PanelDataset, structure: Structure, beta_ref: &[f64]) -> Self {
        let (n, m, p) = (data.n_subjects(), data.response_dim(), data.n_covariates());
        let n_groups = match structure {
            Structure::Ar1 => m - 1,
            Structure::Cs => 1,
        };
        let mut groups: Vec<LagGroup> = (0..n_groups)
            .map(|g| LagGroup {
                lag: g + 1,
                count: 0.0,
                sq0: 0.0,
                sq_lin: DVector::zeros(p),
                sq_quad: DMatrix::zeros(p, p),
                cr0: 0.0,
                cr_lin: DVector::zeros(p),
                cr_quad: DMatrix::zeros(p, p),
            })
            .collect();
        let group_of = |lag: usize| match structure {
            Structure::Ar1 => lag - 1,
            Structure::Cs => 0,
        };

        // per-position aggregates for the squared terms
        let mut pos_e2 = vec![0.0; m];
        let mut pos_xe = vec![DVector::<f64>::zeros(p); m];
        let mut pos_xx = vec![DMatrix::<f64>::zeros(p, p); m];
        let mut cross_xx = vec![DMatrix::<f64>::zeros(p, p); n_groups];
        for i in 0..n {
            let e = residuals(data, i, beta_ref);
            let xs: Vec<DVector<f64>> = (0..m).map(|r| DVector::from_column_slice(data.covariate_row(i, r))).collect();
            for r in 0..m {
                pos_e2[r] += e[r] * e[r];
                pos_xe[r].axpy(e[r], &xs[r], 1.0);
                pos_xx[r].ger(1.0, &xs[r], &xs[r], 1.0);
            }
            for r in 0..m - 1 {
                for t in r + 1..m {
                    let g = &mut groups[group_of(t - r)];
                    g.cr0 += e[r] * e[t];
                    g.cr_lin.axpy(e[t], &xs[r], 1.0);
                    g.cr_lin.axpy(e[r], &xs[t], 1.0);
                    cross_xx[group_of(t - r)].ger(1.0, &xs[r], &xs[t], 1.0);
                }
            }
        }
        for r in 0..m - 1 {
            for t in r + 1..m {
                let g = &mut groups[group_of(t - r)];
                g.count += n as f64;
                g.sq0 += pos_e2[r] + pos_e2[t];
                g.sq_lin += &pos_xe[r] + &pos_xe[t];
                g.sq_quad += &pos_xx[r] + &pos_xx[t];
            }
        }
        for (g, cross) in groups.iter_mut().zip(cross_xx) {
            g.cr_quad = (&cross + cross.transpose()) * 0.5;
        }
        Self {
            beta_ref: DVector::from_column_slice(beta_ref),
            groups,
            n_subjects: n,
            pairs_per_subject: m * (m - 1) / 2,
            m,
        }
    }

    pub fn pairs_per_subject(&self) -> usize {
        self.pairs_per_subject
    }

    fn group_weights(&self, gamma: &DependenceKind) -> Option<Vec<(f64, f64)>> {
        let s2 = gamma.sigma() * gamma.sigma();
        self.groups
            .iter()
            .map(|g| {
                let c = gamma.pair_correlation(g.lag).ok()?;
                let one_minus = 1.0 - c * c;
                if !(one_minus > 0.0) || !(s2 > 0.0) {
                    return None;
                }
                Some((c, 1.0 / (2.0 * s2 * one_minus)))
            })
            .collect()
    }

    /// Log-CL and its β-gradient; `None` outside the parameter space.
    pub fn logcl_and_grad(&self, beta: &DVector<f64>, gamma: &DependenceKind) -> Option<(f64, DVector<f64>)> {
        let weights = self.group_weights(gamma)?;
        let delta = beta - &self.beta_ref;
        let log_s2 = 2.0 * gamma.sigma().ln();
        let mut value = 0.0;
        let mut grad = DVector::zeros(delta.len());
        for (g, &(c, w)) in self.groups.iter().zip(&weights) {
            let hd = &g.sq_quad * &delta;
            let kd = &g.cr_quad * &delta;
            let q = g.sq0 - 2.0 * g.sq_lin.dot(&delta) + delta.dot(&hd);
            let cr = g.cr0 - g.cr_lin.dot(&delta) + delta.dot(&kd);
            let log_norm = -(2.0 * PI).ln() - log_s2 - 0.5 * (1.0 - c * c).ln();
            value += g.count * log_norm - w * (q - 2.0 * c * cr);
            // ∇(q − 2c·cr) = −2 sq_lin + 2Hδ − 2c(−cr_lin + 2Kδ)
            grad.axpy(2.0 * w, &g.sq_lin, 1.0);
            grad.axpy(-2.0 * w, &hd, 1.0);
            grad.axpy(-2.0 * w * c, &g.cr_lin, 1.0);
            grad.axpy(4.0 * w * c, &kd, 1.0);
        }
        Some((value, grad))
    }

    /// Exact maximizer of the log-CL over β for fixed γ (the log-CL is
    /// quadratic in β).
    pub fn profile_beta(&self, gamma: &DependenceKind) -> Option<DVector<f64>> {
        let weights = self.group_weights(gamma)?;
        let p = self.beta_ref.len();
        let mut lhs = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (g, &(c, w)) in self.groups.iter().zip(&weights) {
            lhs += (&g.sq_quad - &g.cr_quad * (2.0 * c)) * w;
            rhs += (&g.sq_lin - &g.cr_lin * c) * w;
        }
        let chol = lhs.cholesky()?;
        Some(&self.beta_ref + chol.solve(&rhs))
    }

    /// −∇²_β cℓ at fixed γ; equals N times the block sensitivity.
    pub fn beta_hessian(&self, gamma: &DependenceKind) -> Option<DMatrix<f64>> {
        let weights = self.group_weights(gamma)?;
        let p = self.beta_ref.len();
        let mut h = DMatrix::zeros(p, p);
        for (g, &(c, w)) in self.groups.iter().zip(&weights) {
            h += (&g.sq_quad - &g.cr_quad * (2.0 * c)) * (2.0 * w);
        }
        Some(h)
    }

    fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    fn block_dim(&self) -> usize {
        self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub nelder_mead: NelderMeadOptions,
    pub bfgs: BfgsOptions,
    pub start_sigma: f64,
    pub start_rho: f64,
    /// Common starting value for every β coordinate.
    pub start_beta: f64,
    /// Bound on the mean β-score sup-norm at the optimum, scaled by
    /// max(1, largest per-column score RMS).
    pub score_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nelder_mead: NelderMeadOptions::default(),
            bfgs: BfgsOptions::default(),
            start_sigma: 1.0,
            start_rho: 0.0,
            start_beta: 1.0,
            score_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub simplex_iterations: usize,
    pub simplex_converged: bool,
    pub quasi_newton_iterations: usize,
    pub quasi_newton_converged: bool,
    pub gradient_norm: f64,
    pub message: String,
}

impl std::fmt::Display for OptimizerTrace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "simplex {} iters (converged: {}), quasi-Newton {} iters (converged: {}), |grad| {:.3e}: {}",
            self.simplex_iterations,
            self.simplex_converged,
            self.quasi_newton_iterations,
            self.quasi_newton_converged,
            self.gradient_norm,
            self.message
        )
    }
}

/// Per-block MCLE and the summary statistics the integration step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub name: String,
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DependenceKind,
    /// N×p, row i = ψ(β̂; yᵢ, γ̂)ᵀ
    pub subject_scores: DMatrix<f64>,
    pub sensitivity: DMatrix<f64>,
    pub logcl_at_optimum: f64,
    pub trace: OptimizerTrace,
}

impl BlockFit {
    pub fn n_subjects(&self) -> usize {
        self.subject_scores.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta_hat.len()
    }
}

fn check_rank(name: &str, data: &PanelDataset) -> Result<()> {
    let p = data.n_covariates();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    for i in 0..data.n_subjects() {
        let x = data.covariate_matrix(i);
        xtx += x.transpose() * &x;
    }
    let eig = SymmetricEigen::new(xtx).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(DimmError::Singular { block: name.to_string() });
    }
    Ok(())
}

/// Pooled least squares over every coordinate of the block.
fn pooled_ols(data: &PanelDataset) -> Option<DVector<f64>> {
    let p = data.n_covariates();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..data.n_subjects() {
        let x = data.covariate_matrix(i);
        let y = DVector::from_column_slice(data.response(i));
        xtx += x.transpose() * &x;
        xty += x.transpose() * y;
    }
    xtx.cholesky().map(|c| c.solve(&xty))
}

/// Fits one block by maximizing its pairwise log-CL jointly over
/// (β, log σ, θ_ρ): a Nelder–Mead phase from β = (1,…,1), σ = 1, ρ = 0,
/// then BFGS with analytic β-gradients and central-difference θ-gradients.
/// The objective handed to the optimizers is the negative log-CL per
/// subject-pair. Because the log-CL is quadratic in β for fixed γ, the
/// final β is the exact maximizer at γ̂.
pub fn fit_block(name: &str, data: &PanelDataset, structure: Structure, opts: &FitOptions) -> Result<BlockFit> {
    let (n, m, p) = (data.n_subjects(), data.response_dim(), data.n_covariates());
    if n <= p {
        return Err(DimmError::Domain(format!("block `{name}`: need more subjects ({n}) than covariates ({p})")));
    }
    if m < 2 {
        return Err(DimmError::Domain(format!("block `{name}` has no coordinate pairs")));
    }
    check_rank(name, data)?;
    let reference = pooled_ols(data).ok_or_else(|| DimmError::Singular { block: name.into() })?;
    let moments = PairMoments::new(data, structure, reference.as_slice());
    let map = GammaMap::new(structure, m);
    let scale = 1.0 / (moments.n_subjects() as f64 * moments.pairs_per_subject() as f64);

    let start_gamma = structure.with_params(opts.start_sigma, opts.start_rho);
    start_gamma.validate(m).map_err(|e| DimmError::Domain(format!("block `{name}`: start {e}")))?;
    let theta0 = map.to_theta(&start_gamma);
    let mut z0 = vec![opts.start_beta; p];
    z0.extend_from_slice(&theta0);

    let objective = |z: &[f64]| -> f64 {
        let beta = DVector::from_column_slice(&z[..p]);
        let gamma = map.to_gamma([z[p], z[p + 1]]);
        match moments.logcl_and_grad(&beta, &gamma) {
            Some((v, _)) => -v * scale,
            None => f64::INFINITY,
        }
    };
    let simplex = nelder_mead(objective, &z0, &opts.nelder_mead);

    // Quasi-Newton in coordinates β = β₀ + Lᵀ⁻¹u, with L the Cholesky factor
    // of the β-Hessian at the current γ. This keeps the gradient test
    // meaningful when σ is tiny and the raw β-curvature scales like 1/σ².
    let mut beta_base = DVector::from_column_slice(&simplex.x[..p]);
    let mut theta = [simplex.x[p], simplex.x[p + 1]];
    let mut qn_iterations = 0;
    let mut qn = None;
    for _round in 0..MAX_PRECONDITION_ROUNDS {
        let gamma = map.to_gamma(theta);
        let Some(chol) = moments.beta_hessian(&gamma).and_then(|h| (h * scale).cholesky()) else {
            break;
        };
        let l = chol.l();
        let Some(l_inv) = l.clone().try_inverse() else { break };
        let to_beta = l_inv.transpose();
        let value_and_grad = |z: &DVector<f64>| -> (f64, DVector<f64>) {
            let beta = &beta_base + &to_beta * z.rows(0, p);
            let th = [z[p], z[p + 1]];
            let Some((v, gb)) = moments.logcl_and_grad(&beta, &map.to_gamma(th)) else {
                return (f64::INFINITY, DVector::from_element(p + 2, f64::NAN));
            };
            let mut grad = DVector::zeros(p + 2);
            grad.rows_mut(0, p).copy_from(&(&l_inv * (-gb * scale)));
            for k in 0..2 {
                let h = fd_step(th[k]);
                let mut tp = th;
                let mut tm = th;
                tp[k] += h;
                tm[k] -= h;
                let fp = moments.logcl_and_grad(&beta, &map.to_gamma(tp)).map(|r| r.0);
                let fm = moments.logcl_and_grad(&beta, &map.to_gamma(tm)).map(|r| r.0);
                grad[p + k] = match (fp, fm) {
                    (Some(a), Some(b)) => -(a - b) / (2.0 * h) * scale,
                    _ => f64::NAN,
                };
            }
            (-v * scale, grad)
        };
        let mut z0 = vec![0.0; p];
        z0.extend_from_slice(&theta);
        let res = bfgs(value_and_grad, &z0, &opts.bfgs);
        qn_iterations += res.iterations;
        let u = DVector::from_column_slice(&res.x[..p]);
        beta_base = &beta_base + &to_beta * u;
        let sigma_shift = (res.x[p] - theta[0]).abs();
        theta = [res.x[p], res.x[p + 1]];
        let settled = res.converged && sigma_shift < 2f64.ln();
        qn = Some(res);
        if settled {
            break;
        }
    }
    let Some(qn) = qn else {
        return Err(DimmError::Singular { block: name.into() });
    };

    let mut trace = OptimizerTrace {
        simplex_iterations: simplex.iterations,
        simplex_converged: simplex.converged,
        quasi_newton_iterations: qn_iterations,
        quasi_newton_converged: qn.converged,
        gradient_norm: qn.gradient_norm,
        message: qn.message.clone(),
    };
    if !qn.converged {
        return Err(DimmError::FitFailed { block: name.into(), trace: trace.to_string() });
    }
    let gamma_hat = map.to_gamma([qn.x[p], qn.x[p + 1]]);
    gamma_hat
        .validate(m)
        .map_err(|e| DimmError::FitFailed { block: name.into(), trace: format!("{trace}; fitted {e}") })?;
    let beta_hat = moments.profile_beta(&gamma_hat).ok_or_else(|| DimmError::Singular { block: name.into() })?;

    let subject_scores = block_score_beta(beta_hat.as_slice(), &gamma_hat, data)?;
    let mean_score = subject_scores.row_mean();
    let score_norm = mean_score.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    // absolute for ordinary data; relative to the score spread when σ is so
    // small that rounding in the residuals alone exceeds the bound
    let spread = subject_scores.column_iter().map(|c| (c.norm_squared() / n as f64).sqrt()).fold(1.0f64, f64::max);
    if !(score_norm <= opts.score_tol * spread) {
        trace.message = format!("{}; mean score {score_norm:.3e} at optimum", trace.message);
        return Err(DimmError::FitFailed { block: name.into(), trace: trace.to_string() });
    }
    let sensitivity = block_sensitivity(beta_hat.as_slice(), &gamma_hat, data)?;
    let logcl_at_optimum = block_logcl(beta_hat.as_slice(), &gamma_hat, data)?;
    debug_assert_eq!(moments.block_dim(), m);

    Ok(BlockFit { name: name.to_string(), beta_hat, gamma_hat, subject_scores, sensitivity, logcl_at_optimum, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Random dataset with AR(1)-ish noise, used across these tests.
    fn random_block(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize, noise: f64) -> PanelDataset {
        let beta: Vec<f64> = (0..p).map(|k| 0.5 + 0.3 * k as f64).collect();
        let mut y = Vec::with_capacity(n * m);
        let mut x = Vec::with_capacity(n * m * p);
        for _ in 0..n {
            let mut prev = 0.0;
            for r in 0..m {
                let row: Vec<f64> = (0..p)
                    .map(|k| if k == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) + 0.1 * r as f64 })
                    .collect();
                let z: f64 = rng.sample(StandardNormal);
                prev = 0.5 * prev + z;
                y.push(linear_predictor(&row, &beta) + noise * prev);
                x.extend(row);
            }
        }
        PanelDataset::from_raw(n, m, p, y, x).unwrap()
    }

    #[test]
    fn logpdf_at_origin() {
        let omega = PairCovariance::new(1.0, 0.0).unwrap();
        let v = bivariate_normal_logpdf([0.0, 0.0], [0.0, 0.0], &omega);
        assert!((v + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v + 1.837_877_066_409_345_3).abs() < 1e-12);
        let v = bivariate_normal_logpdf([1.0, 1.0], [0.0, 0.0], &omega);
        assert!((v - (-(2.0 * PI).ln() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn logpdf_correlated_matches_direct_inverse() {
        let omega = PairCovariance::new(1.0, 0.5).unwrap();
        // Ω = [[1,.5],[.5,1]], det = .75, Ω⁻¹ = [[1,-.5],[-.5,1]]/.75
        let e = [1.0, 1.0];
        let inv = [[1.0 / 0.75, -0.5 / 0.75], [-0.5 / 0.75, 1.0 / 0.75]];
        let quad: f64 = (0..2).map(|a| (0..2).map(|b| e[a] * inv[a][b] * e[b]).sum::<f64>()).sum();
        let want = -(2.0 * PI).ln() - 0.5 * 0.75f64.ln() - 0.5 * quad;
        let got = bivariate_normal_logpdf([1.0, 1.0], [0.0, 0.0], &omega);
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn pair_covariance_domain() {
        assert!(PairCovariance::new(1.0, 1.0).is_err());
        assert!(PairCovariance::new(0.0, 0.1).is_err());
        assert!(PairCovariance::new(-1.0, 0.1).is_err());
    }

    #[test]
    fn logcl_single_pair_and_enumeration() {
        let data = PanelDataset::from_raw(2, 3, 1, vec![0.3, -0.2, 1.1, 0.5, 0.0, -0.7], vec![1.0; 6]).unwrap();
        let gamma = DependenceKind::Ar1 { sigma: 1.3, rho: 0.4 };
        let beta = [0.2];
        let mut want = 0.0;
        for i in 0..2 {
            let y = data.response(i);
            for (r, t) in [(0, 1), (0, 2), (1, 2)] {
                let om = gamma.pair_covariance(t - r).unwrap();
                want += bivariate_normal_logpdf([y[r], y[t]], [0.2, 0.2], &om);
            }
        }
        assert!((block_logcl(&beta, &gamma, &data).unwrap() - want).abs() < 1e-13);

        let one = data.slice_coordinates(0, 2).unwrap();
        let one = PanelDataset::from_raw(2, 2, 1, one.responses_raw().to_vec(), one.covariates_raw().to_vec()).unwrap();
        let om = gamma.pair_covariance(1).unwrap();
        let want: f64 =
            (0..2).map(|i| bivariate_normal_logpdf([one.response(i)[0], one.response(i)[1]], [0.2, 0.2], &om)).sum();
        assert!((block_logcl(&beta, &gamma, &one).unwrap() - want).abs() < 1e-13);
    }

    #[test]
    fn score_vanishes_at_interpolating_beta() {
        let x = vec![1.0, 0.5, 1.0, -0.3, 1.0, 1.2, 1.0, 0.1];
        let beta = [0.7, -1.1];
        let y: Vec<f64> = x.chunks(2).map(|r| linear_predictor(r, &beta)).collect();
        let data = PanelDataset::from_raw(2, 2, 2, y, x).unwrap();
        let gamma = DependenceKind::Cs { sigma: 0.8, rho: 0.2 };
        let s = block_score_beta(&beta, &gamma, &data).unwrap();
        assert!(s.amax() < 1e-14);
    }

    #[test]
    fn score_independent_pair_closed_form() {
        let data = PanelDataset::from_raw(2, 2, 1, vec![1.0, 2.0, -0.5, 0.3], vec![0.4, -1.2, 2.0, 0.7]).unwrap();
        let sigma = 1.7;
        let gamma = DependenceKind::Cs { sigma, rho: 0.0 };
        let beta = [0.25];
        let s = block_score_beta(&beta, &gamma, &data).unwrap();
        for i in 0..2 {
            let xr = data.covariate_row(i, 0)[0];
            let xt = data.covariate_row(i, 1)[0];
            let er = data.response(i)[0] - xr * beta[0];
            let et = data.response(i)[1] - xt * beta[0];
            let want = (xr * er + xt * et) / (sigma * sigma);
            assert!((s[(i, 0)] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let m = 2 + trial % 5;
            let p = 1 + trial % 4;
            let data = random_block(&mut rng, 7, m, p, 1.0);
            let gamma = if trial % 2 == 0 {
                DependenceKind::Ar1 { sigma: 1.2, rho: 0.3 }
            } else {
                DependenceKind::Cs { sigma: 0.9, rho: 0.25 }
            };
            let beta: Vec<f64> = (0..p).map(|k| 0.1 * k as f64 - 0.2).collect();
            let analytic = block_mean_score(&beta, &gamma, &data).unwrap();
            for k in 0..p {
                let h = 1e-5;
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[k] += h;
                bm[k] -= h;
                let fd = (block_logcl(&bp, &gamma, &data).unwrap() - block_logcl(&bm, &gamma, &data).unwrap())
                    / (2.0 * h * 7.0);
                let rel = (fd - analytic[k]).abs() / analytic[k].abs().max(1e-3);
                assert!(rel < 1e-6, "trial {trial} k {k}: {fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn sensitivity_hand_value_and_scaling() {
        let data = PanelDataset::from_raw(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![1.0; 6]).unwrap();
        let sigma = 1.5;
        let gamma = DependenceKind::Ar1 { sigma, rho: 0.0 };
        let s = block_sensitivity(&[0.0], &gamma, &data).unwrap();
        assert!((s[(0, 0)] - 2.0 / (sigma * sigma)).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_block(&mut rng, 9, 4, 3, 1.0);
        let doubled = PanelDataset::from_raw(
            9,
            4,
            3,
            data.responses_raw().to_vec(),
            data.covariates_raw().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let gamma = DependenceKind::Ar1 { sigma: 1.1, rho: 0.6 };
        let beta = [0.0; 3];
        let s1 = block_sensitivity(&beta, &gamma, &data).unwrap();
        let s2 = block_sensitivity(&beta, &gamma, &doubled).unwrap();
        assert!((s2 - s1 * 4.0).amax() < 1e-12);
    }

    #[test]
    fn sensitivity_is_negative_score_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_block(&mut rng, 12, 5, 3, 1.0);
        let gamma = DependenceKind::Cs { sigma: 1.4, rho: 0.35 };
        let beta = vec![0.3, -0.1, 0.2];
        let s = block_sensitivity(&beta, &gamma, &data).unwrap();
        for k in 0..3 {
            let h = 1e-4;
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[k] += h;
            bm[k] -= h;
            let col = (block_mean_score(&bp, &gamma, &data).unwrap() - block_mean_score(&bm, &gamma, &data).unwrap())
                / (2.0 * h);
            for r in 0..3 {
                assert!((-col[r] - s[(r, k)]).abs() < 1e-6 * s.amax());
            }
        }
        assert!(s.clone().cholesky().is_some());
    }

    #[test]
    fn gamma_score_independent_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_block(&mut rng, 10, 4, 2, 1.0);
        let sigma = 1.3;
        let gamma = DependenceKind::Ar1 { sigma, rho: 0.0 };
        let beta = [0.4, 0.2];
        let g = block_score_gamma(&beta, &gamma, &data).unwrap();
        let mut want = 0.0;
        for i in 0..10 {
            let e = residuals(&data, i, &beta);
            for r in 0..3 {
                for t in r + 1..4 {
                    want += -2.0 / sigma + (e[r] * e[r] + e[t] * e[t]) / sigma.powi(3);
                }
            }
        }
        want /= 10.0;
        assert!((g[0] - want).abs() < 1e-6 * want.abs().max(1.0), "{} vs {want}", g[0]);

        let far = DependenceKind::Ar1 { sigma: 50.0, rho: 0.0 };
        assert!(block_score_gamma(&beta, &far, &data).unwrap()[0] < 0.0);
    }

    #[test]
    fn moments_agree_with_direct_logcl() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (structure, gamma) in [
            (Structure::Ar1, DependenceKind::Ar1 { sigma: 1.7, rho: -0.4 }),
            (Structure::Cs, DependenceKind::Cs { sigma: 0.6, rho: 0.2 }),
        ] {
            let data = random_block(&mut rng, 15, 6, 3, 1.0);
            let reference = pooled_ols(&data).unwrap();
            let moments = PairMoments::new(&data, structure, reference.as_slice());
            let beta = DVector::from_vec(vec![0.1, 0.9, -0.3]);
            let (fast, grad) = moments.logcl_and_grad(&beta, &gamma).unwrap();
            let slow = block_logcl(beta.as_slice(), &gamma, &data).unwrap();
            assert!((fast - slow).abs() < 1e-10 * slow.abs());
            let score = block_mean_score(beta.as_slice(), &gamma, &data).unwrap() * 15.0;
            assert!((grad - score).amax() < 1e-9);
        }
    }

    #[test]
    fn fit_recovers_noiseless_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_block(&mut rng, 40, 5, 3, 1e-6);
        let fit = fit_block("b", &data, Structure::Ar1, &FitOptions::default()).unwrap();
        for (k, b) in fit.beta_hat.iter().enumerate() {
            assert!((b - (0.5 + 0.3 * k as f64)).abs() < 1e-6, "{b}");
        }
    }

    #[test]
    fn fit_independent_cs_pair_is_pooled_ols() {
        // with two coordinates and zero correlation the pairwise CL is the
        // Gaussian likelihood with identity correlation, so β̂ is pooled OLS
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            for _ in 0..2 {
                let x1: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                x.extend([1.0, x1]);
                y.push(0.4 - 0.8 * x1 + e);
            }
        }
        let data = PanelDataset::from_raw(n, 2, 2, y, x).unwrap();
        let fit = fit_block("pair", &data, Structure::Cs, &FitOptions::default()).unwrap();
        // OLS oracle via explicit 2x2 normal equations
        let (mut sxx, mut sxy) = ([[0.0; 2]; 2], [0.0; 2]);
        for i in 0..n {
            for r in 0..2 {
                let row = data.covariate_row(i, r);
                for a in 0..2 {
                    sxy[a] += row[a] * data.response(i)[r];
                    for b in 0..2 {
                        sxx[a][b] += row[a] * row[b];
                    }
                }
            }
        }
        let det = sxx[0][0] * sxx[1][1] - sxx[0][1] * sxx[1][0];
        let ols = [(sxx[1][1] * sxy[0] - sxx[0][1] * sxy[1]) / det, (sxx[0][0] * sxy[1] - sxx[1][0] * sxy[0]) / det];
        // the fitted ρ is free, so OLS only coincides when ρ̂ ≈ 0; refit
        // the profile at ρ = 0 to compare like with like
        let reference = pooled_ols(&data).unwrap();
        let moments = PairMoments::new(&data, Structure::Cs, reference.as_slice());
        let at_zero = moments.profile_beta(&DependenceKind::Cs { sigma: fit.gamma_hat.sigma(), rho: 0.0 }).unwrap();
        assert!((at_zero[0] - ols[0]).abs() < 1e-10 && (at_zero[1] - ols[1]).abs() < 1e-10);
        assert!(fit.gamma_hat.rho().abs() < 0.3);
    }

    #[test]
    fn fit_satisfies_first_order_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for structure in [Structure::Ar1, Structure::Cs] {
            let data = random_block(&mut rng, 200, 6, 3, 2.0);
            let fit = fit_block("b", &data, structure, &FitOptions::default()).unwrap();
            let mean = fit.subject_scores.row_mean();
            assert!(mean.amax() <= 1e-6);
            let g = block_score_gamma(fit.beta_hat.as_slice(), &fit.gamma_hat, &data).unwrap();
            assert!(g[0].abs() <= 1e-4 && g[1].abs() <= 1e-4, "{g:?}");
            assert!(fit.sensitivity.clone().cholesky().is_some());
        }
    }

    #[test]
    fn fit_is_start_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_block(&mut rng, 150, 5, 2, 1.5);
        let a = fit_block("b", &data, Structure::Ar1, &FitOptions::default()).unwrap();
        let opts = FitOptions { start_sigma: 2.0, start_rho: 0.1, ..Default::default() };
        let b = fit_block("b", &data, Structure::Ar1, &opts).unwrap();
        assert!((a.logcl_at_optimum - b.logcl_at_optimum).abs() <= 1e-6);
    }

    #[test]
    fn fit_rejects_rank_deficient_design() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n * 3 {
            let v: f64 = rng.sample(StandardNormal);
            x.extend([v, 2.0 * v]);
            y.push(rng.sample::<f64, _>(StandardNormal));
        }
        let data = PanelDataset::from_raw(n, 3, 2, y, x).unwrap();
        let err = fit_block("dup", &data, Structure::Ar1, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, DimmError::Singular { ref block } if block == "dup"));
    }

    #[test]
    fn gamma_map_round_trip() {
        for (structure, m) in [(Structure::Ar1, 5), (Structure::Cs, 5), (Structure::Cs, 2)] {
            let map = GammaMap::new(structure, m);
            for rho in [-0.2, 0.0, 0.45, 0.9] {
                let g = structure.with_params(1.7, rho);
                let back = map.to_gamma(map.to_theta(&g));
                assert!((back.rho() - rho).abs() < 1e-12 && (back.sigma() - 1.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_rejects_too_few_subjects() {
        let data = PanelDataset::from_raw(2, 2, 2, vec![0.0; 4], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.2]).unwrap();
        assert!(fit_block("x", &data, Structure::Ar1, &FitOptions::default()).is_err());
    }
}
