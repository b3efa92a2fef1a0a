//! Comparator estimators: GLS with the true covariance, and GEE with an
//! independence or exchangeable working correlation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{DimmError, Result};
use crate::model::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "GLS_ORACLE")]
    GlsOracle,
    #[serde(rename = "GEE_IND")]
    GeeInd,
    #[serde(rename = "GEE_CS")]
    GeeCs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub beta_hat: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Working-correlation estimate for GEE-CS.
    pub rho_hat: Option<f64>,
    pub warnings: Vec<String>,
}

impl BaselineFit {
    pub fn std_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m.cholesky().ok_or_else(|| DimmError::Singular { block: what.to_string() })?.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// GLS with a known M×M covariance. The Cholesky factor is computed once so
/// the same oracle can be applied to many replicates.
#[derive(Debug, Clone)]
pub struct GlsOracle {
    chol: Cholesky<f64, Dyn>,
}

impl GlsOracle {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(DimmError::Covariance("oracle covariance must be square".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| DimmError::Covariance("oracle covariance is not positive definite".into()))?;
        Ok(Self { chol })
    }

    pub fn fit(&self, data: &PanelDataset) -> Result<BaselineFit> {
        let m = data.response_dim();
        if self.chol.l_dirty().nrows() != m {
            return Err(DimmError::Covariance(format!(
                "oracle covariance is {0}x{0} but the response dimension is {m}",
                self.chol.l_dirty().nrows()
            )));
        }
        let p = data.n_covariates();
        let l = self.chol.l();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for i in 0..data.n_subjects() {
            let wx = l.solve_lower_triangular(&data.covariate_matrix(i)).expect("positive diagonal");
            let wy =
                l.solve_lower_triangular(&DVector::from_column_slice(data.response(i))).expect("positive diagonal");
            xtx += wx.transpose() * &wx;
            xty += wx.transpose() * wy;
        }
        let covariance = spd_inverse(xtx, "GLS normal matrix")?;
        Ok(BaselineFit {
            method: BaselineMethod::GlsOracle,
            beta_hat: &covariance * xty,
            covariance,
            iterations: 1,
            converged: true,
            rho_hat: None,
            warnings: Vec::new(),
        })
    }
}

pub fn gls_oracle(data: &PanelDataset, sigma: &DMatrix<f64>) -> Result<BaselineFit> {
    GlsOracle::new(sigma)?.fit(data)
}

pub const GEE_TOL: f64 = 1e-8;
pub const GEE_MAX_ITER: usize = 100;
/// Margin kept from the exchangeable-correlation bounds when clamping.
const RHO_MARGIN: f64 = 1e-6;

/// Per-subject pieces for the exchangeable working inverse
/// V⁻¹ ∝ I − c 𝟙𝟙ᵀ with c = ρ / (1 + (M − 1)ρ); the σ² and 1/(1−ρ) factors
/// cancel in both the β update and the sandwich.
struct SubjectSums {
    xtx: DMatrix<f64>,
    col_sum: DVector<f64>,
}

fn exchangeable_c(rho: f64, m: usize) -> f64 {
    rho / (1.0 + (m as f64 - 1.0) * rho)
}

/// GEE with independence (OLS) or exchangeable working correlation, with
/// robust sandwich covariance.
pub fn gee_fit(data: &PanelDataset, working: WorkingCorrelation) -> Result<BaselineFit> {
    let (n, m, p) = (data.n_subjects(), data.response_dim(), data.n_covariates());
    if n <= p {
        return Err(DimmError::Domain(format!("GEE needs more subjects ({n}) than covariates ({p})")));
    }
    let subjects: Vec<SubjectSums> = (0..n)
        .map(|i| {
            let x = data.covariate_matrix(i);
            let col_sum = DVector::from_iterator(p, x.column_iter().map(|c| c.sum()));
            SubjectSums { xtx: x.transpose() * &x, col_sum }
        })
        .collect();

    // β-update for a given c: (Σ XᵀX − c uuᵀ)⁻¹ Σ (Xᵀy − c u 𝟙ᵀy)
    let solve = |c: f64| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for (i, s) in subjects.iter().enumerate() {
            let y = data.response(i);
            let ysum: f64 = y.iter().sum();
            a += &s.xtx - &s.col_sum * s.col_sum.transpose() * c;
            let mut xty = DVector::zeros(p);
            for (r, &yr) in y.iter().enumerate() {
                for (k, &xk) in data.covariate_row(i, r).iter().enumerate() {
                    xty[k] += xk * yr;
                }
            }
            b += xty - &s.col_sum * (c * ysum);
        }
        let bread = spd_inverse(a, "GEE normal matrix")?;
        Ok((&bread * b, bread))
    };
    let residuals = |beta: &DVector<f64>, i: usize| -> Vec<f64> {
        (0..m)
            .map(|r| {
                let x = data.covariate_row(i, r);
                data.response(i)[r] - x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };

    let (mut beta, mut bread) = solve(0.0)?;
    let mut c = 0.0;
    let mut iterations = 1;
    let mut converged = true;
    let mut rho_hat = None;
    let mut warnings = Vec::new();

    if working == WorkingCorrelation::Exchangeable {
        converged = false;
        let lower = -1.0 / (m as f64 - 1.0);
        for it in 1..=GEE_MAX_ITER {
            iterations = it;
            let mut ss = 0.0;
            let mut cross = 0.0;
            for i in 0..n {
                let e = residuals(&beta, i);
                let sum: f64 = e.iter().sum();
                let sq: f64 = e.iter().map(|v| v * v).sum();
                ss += sq;
                cross += 0.5 * (sum * sum - sq);
            }
            let sigma2 = ss / (n * m) as f64;
            let n_pairs = (n * m * (m - 1) / 2) as f64;
            let mut rho = cross / n_pairs / sigma2;
            if !(rho > lower && rho < 1.0) || !rho.is_finite() {
                let clamped = rho.clamp(lower + RHO_MARGIN, 1.0 - RHO_MARGIN);
                let clamped = if clamped.is_finite() { clamped } else { 0.0 };
                warnings.push(format!(
                    "iteration {it}: working correlation {rho} outside ({lower}, 1), clamped to {clamped}"
                ));
                rho = clamped;
            }
            rho_hat = Some(rho);
            c = exchangeable_c(rho, m);
            let (next, next_bread) = solve(c)?;
            let step = (&next - &beta).amax();
            beta = next;
            bread = next_bread;
            if step <= GEE_TOL {
                converged = true;
                break;
            }
        }
    }

    // meat Σ XᵀV⁻¹e eᵀV⁻¹X, with V⁻¹ in the same scaled form as the bread
    let mut meat = DMatrix::zeros(p, p);
    for (i, s) in subjects.iter().enumerate() {
        let e = residuals(&beta, i);
        let esum: f64 = e.iter().sum();
        let mut g = -&s.col_sum * (c * esum);
        for (r, &er) in e.iter().enumerate() {
            for (k, &xk) in data.covariate_row(i, r).iter().enumerate() {
                g[k] += xk * er;
            }
        }
        meat += &g * g.transpose();
    }
    let cov = &bread * meat * &bread;
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(BaselineFit {
        method: match working {
            WorkingCorrelation::Independence => BaselineMethod::GeeInd,
            WorkingCorrelation::Exchangeable => BaselineMethod::GeeCs,
        },
        beta_hat: beta,
        covariance,
        iterations,
        converged,
        rho_hat,
        warnings,
    })
}
