//! Integration of block fits: stacked scores, the optimal weight matrix,
//! the one-step meta-estimator with its covariance, the GMM objective Q_N,
//! and the over-identification and Wald tests built on them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{chi2_sf, two_sided_normal_pvalue};
use crate::error::{DimmError, Result};
use crate::model::PanelDataset;
use crate::optim::{bfgs, BfgsOptions};
use crate::pairwise::{block_mean_score, BlockFit};

/// Per-subject stacked scores: row i is (ψ₁ᵀ, …, ψ_Jᵀ) at the block MCLEs.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedScores {
    pub psi: DMatrix<f64>,
    pub n_covariates: usize,
    pub block_names: Vec<String>,
}

impl StackedScores {
    pub fn n_blocks(&self) -> usize {
        self.block_names.len()
    }

    /// Columns of block `j`.
    pub fn block_columns(&self, j: usize) -> std::ops::Range<usize> {
        j * self.n_covariates..(j + 1) * self.n_covariates
    }

    /// The N×p score matrix of block `j`.
    pub fn unstack(&self, j: usize) -> DMatrix<f64> {
        self.psi.columns(j * self.n_covariates, self.n_covariates).into_owned()
    }
}

fn check_fits(fits: &[BlockFit]) -> Result<(usize, usize)> {
    let first = fits.first().ok_or_else(|| DimmError::Stacking("no block fits".into()))?;
    let (n, p) = (first.n_subjects(), first.n_covariates());
    for f in fits {
        if f.n_subjects() != n || f.n_covariates() != p {
            return Err(DimmError::Stacking(format!(
                "block `{}` has N = {}, p = {}; block `{}` has N = {n}, p = {p}",
                f.name,
                f.n_subjects(),
                f.n_covariates(),
                first.name
            )));
        }
    }
    Ok((n, p))
}

pub fn stack_scores(fits: &[BlockFit]) -> Result<StackedScores> {
    let (n, p) = check_fits(fits)?;
    let mut psi = DMatrix::zeros(n, fits.len() * p);
    for (j, f) in fits.iter().enumerate() {
        psi.columns_mut(j * p, p).copy_from(&f.subject_scores);
    }
    Ok(StackedScores { psi, n_covariates: p, block_names: fits.iter().map(|f| f.name.clone()).collect() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub v_hat: DMatrix<f64>,
    pub v_hat_inv: DMatrix<f64>,
    /// 0 when V̂ inverted cleanly.
    pub ridge_used: f64,
    /// N ≤ Jp: V̂ is estimated from too few subjects to be reliable.
    pub small_sample: bool,
}

const RIDGE_START: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e-2;

/// V̂ = (1/N) Σᵢ ψ_N(yᵢ) ψ_N(yᵢ)ᵀ (uncentered), inverted by Cholesky, with a
/// ridge λ·trace/(Jp)·I escalated ×10 from 1e-8 to 1e-2 if needed.
pub fn weight_matrix(scores: &StackedScores) -> Result<WeightMatrix> {
    let n = scores.psi.nrows();
    let dim = scores.psi.ncols();
    let raw = scores.psi.transpose() * &scores.psi / n as f64;
    let v_hat = (&raw + raw.transpose()) * 0.5;
    if let Some(chol) = v_hat.clone().cholesky() {
        if chol.l().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
            let v_hat_inv = chol.inverse();
            return Ok(WeightMatrix { v_hat, v_hat_inv, ridge_used: 0.0, small_sample: n <= dim });
        }
    }
    let scale = v_hat.trace() / dim as f64;
    let mut lambda = RIDGE_START;
    while lambda <= RIDGE_MAX * (1.0 + 1e-12) {
        let ridge = lambda * scale;
        let shifted = &v_hat + DMatrix::identity(dim, dim) * ridge;
        if let Some(chol) = shifted.cholesky() {
            return Ok(WeightMatrix { v_hat_inv: chol.inverse(), v_hat, ridge_used: ridge, small_sample: n <= dim });
        }
        lambda *= 10.0;
    }
    Err(DimmError::SingularWeight { ridge: RIDGE_MAX * scale })
}

/// The p×p slice [V̂⁻¹]_{i,j}.
fn inverse_block(w: &WeightMatrix, i: usize, j: usize, p: usize) -> DMatrix<f64> {
    w.v_hat_inv.view((i * p, j * p), (p, p)).into_owned()
}

fn check_weights(fits: &[BlockFit], w: &WeightMatrix) -> Result<usize> {
    let (_, p) = check_fits(fits)?;
    if w.v_hat_inv.shape() != (fits.len() * p, fits.len() * p) {
        return Err(DimmError::Integration(format!(
            "weight matrix is {}x{}, expected {}x{}",
            w.v_hat_inv.nrows(),
            w.v_hat_inv.ncols(),
            fits.len() * p,
            fits.len() * p
        )));
    }
    Ok(p)
}

/// Σ_{i,j} Sᵢ [V̂⁻¹]_{i,j} S_j, accumulated block by block.
pub fn godambe_bread(fits: &[BlockFit], w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let p = check_weights(fits, w)?;
    let mut bread = DMatrix::zeros(p, p);
    for (i, fi) in fits.iter().enumerate() {
        for (j, fj) in fits.iter().enumerate() {
            bread += &fi.sensitivity * inverse_block(w, i, j, p) * &fj.sensitivity;
        }
    }
    Ok((&bread + bread.transpose()) * 0.5)
}

/// Same quantity as [`godambe_bread`] computed as Gᵀ V̂⁻¹ G with G the
/// Jp×p column stack of the block sensitivities.
pub fn godambe_bread_stacked(fits: &[BlockFit], w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let p = check_weights(fits, w)?;
    let mut g = DMatrix::zeros(fits.len() * p, p);
    for (j, f) in fits.iter().enumerate() {
        // sensitivities are symmetric, so Sⱼᵀ = Sⱼ
        g.view_mut((j * p, 0), (p, p)).copy_from(&f.sensitivity.transpose());
    }
    let bread = g.transpose() * &w.v_hat_inv * &g;
    Ok((&bread + bread.transpose()) * 0.5)
}

/// β̂_DIMM = (Σ Sᵢ[V̂⁻¹]ᵢⱼSⱼ)⁻¹ Σ Sᵢ[V̂⁻¹]ᵢⱼSⱼβ̂ⱼ.
pub fn one_step_estimator(fits: &[BlockFit], w: &WeightMatrix) -> Result<DVector<f64>> {
    let p = check_weights(fits, w)?;
    let bread = godambe_bread(fits, w)?;
    let mut rhs = DVector::zeros(p);
    for (i, fi) in fits.iter().enumerate() {
        for (j, fj) in fits.iter().enumerate() {
            rhs += &fi.sensitivity * inverse_block(w, i, j, p) * (&fj.sensitivity * &fj.beta_hat);
        }
    }
    let chol = bread
        .cholesky()
        .ok_or_else(|| DimmError::Integration("combined sensitivity matrix is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

fn invert_pd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m.cholesky().ok_or_else(|| DimmError::Integration(format!("{what} is not positive definite")))?.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// (N · Σ Sᵢ[V̂⁻¹]ᵢⱼSⱼ)⁻¹.
pub fn dimm_covariance(fits: &[BlockFit], w: &WeightMatrix) -> Result<DMatrix<f64>> {
    let (n, _) = check_fits(fits)?;
    invert_pd(godambe_bread(fits, w)? * n as f64, "combined sensitivity matrix")
}

/// Ψ_N(β): stacked mean block scores re-evaluated on the data at β with
/// each block's γ held at γ̂ⱼ. Blocks are evaluated concurrently.
pub fn stacked_mean_score(beta: &[f64], blocks: &[PanelDataset], fits: &[BlockFit]) -> Result<DVector<f64>> {
    if blocks.len() != fits.len() {
        return Err(DimmError::Integration(format!("{} block datasets for {} fits", blocks.len(), fits.len())));
    }
    let (_, p) = check_fits(fits)?;
    let parts: Vec<DVector<f64>> = blocks
        .par_iter()
        .zip(fits.par_iter())
        .map(|(data, fit)| block_mean_score(beta, &fit.gamma_hat, data))
        .collect::<Result<_>>()?;
    let mut out = DVector::zeros(fits.len() * p);
    for (j, part) in parts.iter().enumerate() {
        out.rows_mut(j * p, p).copy_from(part);
    }
    Ok(out)
}

/// N Ψᵀ V̂⁻¹ Ψ for an already computed stacked mean score.
pub fn quadratic_form(mean_score: &DVector<f64>, w: &WeightMatrix, n_subjects: usize) -> f64 {
    let q = n_subjects as f64 * mean_score.dot(&(&w.v_hat_inv * mean_score));
    q.max(0.0)
}

/// GMM objective Q_N(β) = N Ψ_N(β)ᵀ V̂⁻¹ Ψ_N(β), with a fresh pass over the
/// block data.
pub fn q_statistic(beta: &[f64], blocks: &[PanelDataset], fits: &[BlockFit], w: &WeightMatrix) -> Result<f64> {
    check_weights(fits, w)?;
    let psi = stacked_mean_score(beta, blocks, fits)?;
    Ok(quadratic_form(&psi, w, fits[0].n_subjects()))
}

/// log of the confidence-estimating-function density, dropping its
/// normalizing constant: −Q_N(β)/2.
pub fn cef_log_density(beta: &[f64], blocks: &[PanelDataset], fits: &[BlockFit], w: &WeightMatrix) -> Result<f64> {
    Ok(-0.5 * q_statistic(beta, blocks, fits, w)?)
}

/// Over-identification test: df = (J − 1)p, p-value = P(χ²_df > q).
pub fn gof_test(q_stat: f64, n_blocks: usize, n_covariates: usize) -> Result<(usize, f64)> {
    if n_blocks < 2 {
        return Err(DimmError::TestUndefined(format!("{n_blocks} block(s) give no over-identifying restrictions")));
    }
    let df = (n_blocks - 1) * n_covariates;
    Ok((df, chi2_sf(q_stat.max(0.0), df as f64)?))
}

/// Full GMM estimator: numerical minimization of Q_N from `start`, with
/// central-difference gradients of the re-evaluated objective.
pub fn full_gmm_estimate(
    start: &[f64],
    blocks: &[PanelDataset],
    fits: &[BlockFit],
    w: &WeightMatrix,
    opts: &BfgsOptions,
) -> Result<DVector<f64>> {
    let objective = |beta: &[f64]| q_statistic(beta, blocks, fits, w).unwrap_or(f64::INFINITY);
    let value_and_grad = |b: &DVector<f64>| {
        let f = objective(b.as_slice());
        let mut g = DVector::zeros(b.len());
        for k in 0..b.len() {
            let h = 1e-6 * b[k].abs().max(1.0);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[k] += h;
            bm[k] -= h;
            g[k] = (objective(bp.as_slice()) - objective(bm.as_slice())) / (2.0 * h);
        }
        (f, g)
    };
    let res = bfgs(value_and_grad, start, opts);
    if !res.converged {
        return Err(DimmError::Integration(format!("GMM minimization failed: {}", res.message)));
    }
    Ok(DVector::from_vec(res.x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedFit {
    pub beta_dimm: DVector<f64>,
    /// Already divided by N.
    pub covariance: DMatrix<f64>,
    pub q_stat: f64,
    /// `None` for a single block, where the test is undefined.
    pub gof: Option<(usize, f64)>,
    pub wald: Vec<WaldTest>,
    pub blocks_used: Vec<String>,
    pub ridge_used: f64,
    pub small_sample: bool,
    pub n_subjects: usize,
}

impl IntegratedFit {
    pub fn gof_df(&self) -> Option<usize> {
        self.gof.map(|g| g.0)
    }

    pub fn gof_pvalue(&self) -> Option<f64> {
        self.gof.map(|g| g.1)
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

const Z_975: f64 = 1.96;

/// Per-coefficient Wald z, two-sided p-value and 95% interval.
pub fn wald_tests(beta: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<Vec<WaldTest>> {
    beta.iter()
        .enumerate()
        .map(|(q, &estimate)| {
            let var = covariance[(q, q)];
            let std_error = var.sqrt();
            if !(std_error.is_finite() && std_error > 0.0) {
                return Err(DimmError::Integration(format!("coefficient {q} has non-finite or zero standard error")));
            }
            let z = estimate / std_error;
            Ok(WaldTest {
                estimate,
                std_error,
                z,
                p_value: two_sided_normal_pvalue(z),
                ci_lower: estimate - Z_975 * std_error,
                ci_upper: estimate + Z_975 * std_error,
            })
        })
        .collect()
}

/// Integrates the given block fits: weight matrix, β̂_DIMM, covariance,
/// Q_N(β̂_DIMM) from a second data pass, the over-identification test when
/// J ≥ 2, and Wald tests.
pub fn integrate(fits: &[BlockFit], blocks: &[PanelDataset]) -> Result<IntegratedFit> {
    let (n, p) = check_fits(fits)?;
    let scores = stack_scores(fits)?;
    let w = weight_matrix(&scores)?;
    let beta_dimm = one_step_estimator(fits, &w)?;
    let covariance = dimm_covariance(fits, &w)?;
    let q_stat = q_statistic(beta_dimm.as_slice(), blocks, fits, &w)?;
    let gof = if fits.len() >= 2 { Some(gof_test(q_stat, fits.len(), p)?) } else { None };
    let wald = wald_tests(&beta_dimm, &covariance)?;
    Ok(IntegratedFit {
        beta_dimm,
        covariance,
        q_stat,
        gof,
        wald,
        blocks_used: scores.block_names,
        ridge_used: w.ridge_used,
        small_sample: w.small_sample,
        n_subjects: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DependenceKind;
    use crate::pairwise::OptimizerTrace;

    fn fake_fit(name: &str, scores: DMatrix<f64>, sens: DMatrix<f64>, beta: Vec<f64>) -> BlockFit {
        BlockFit {
            name: name.into(),
            beta_hat: DVector::from_vec(beta),
            gamma_hat: DependenceKind::Ar1 { sigma: 1.0, rho: 0.0 },
            subject_scores: scores,
            sensitivity: sens,
            logcl_at_optimum: 0.0,
            trace: OptimizerTrace {
                simplex_iterations: 0,
                simplex_converged: true,
                quasi_newton_iterations: 0,
                quasi_newton_converged: true,
                gradient_norm: 0.0,
                message: String::new(),
            },
        }
    }

    fn pseudo_scores(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let raw = DMatrix::from_fn(n, p, |i, k| {
            (((i as u64 + 1) * 2654435761 + (k as u64 + 3) * 40503 + seed * 97) % 1000) as f64 / 500.0 - 1.0
        });
        let mean = raw.row_mean();
        DMatrix::from_fn(n, p, |i, k| raw[(i, k)] - mean[k])
    }

    #[test]
    fn stacking_layout_and_round_trip() {
        let a = pseudo_scores(6, 2, 1);
        let b = pseudo_scores(6, 2, 2);
        let s = DMatrix::identity(2, 2);
        let fits =
            vec![fake_fit("a", a.clone(), s.clone(), vec![0.0, 0.0]), fake_fit("b", b.clone(), s, vec![0.0, 0.0])];
        let st = stack_scores(&fits).unwrap();
        assert_eq!(st.psi.ncols(), 4);
        assert_eq!(st.unstack(0), a);
        assert_eq!(st.unstack(1), b);
        assert_eq!(st.block_columns(1), 2..4);

        let one = stack_scores(&fits[..1]).unwrap();
        assert_eq!(one.psi, a);
    }

    #[test]
    fn stacking_rejects_mismatch() {
        let fits = vec![
            fake_fit("a", pseudo_scores(6, 2, 1), DMatrix::identity(2, 2), vec![0.0; 2]),
            fake_fit("b", pseudo_scores(5, 2, 1), DMatrix::identity(2, 2), vec![0.0; 2]),
        ];
        assert!(matches!(stack_scores(&fits), Err(DimmError::Stacking(_))));
    }

    #[test]
    fn weight_matrix_hand_value() {
        let fit = fake_fit("a", DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), DMatrix::identity(1, 1), vec![0.0]);
        let w = weight_matrix(&stack_scores(&[fit]).unwrap()).unwrap();
        assert_eq!(w.v_hat[(0, 0)], 1.0);
        assert_eq!(w.ridge_used, 0.0);
    }

    #[test]
    fn weight_matrix_block_diagonal_for_orthogonal_blocks() {
        let a = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, -1.0]);
        let s = DMatrix::identity(1, 1);
        let w = weight_matrix(
            &stack_scores(&[fake_fit("a", a, s.clone(), vec![0.0]), fake_fit("b", b, s, vec![0.0])]).unwrap(),
        )
        .unwrap();
        assert_eq!(w.v_hat[(0, 1)], 0.0);
        assert_eq!(w.v_hat[(1, 0)], 0.0);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn weight_matrix_matches_outer_product_oracle() {
        let fits: Vec<_> = (0..3)
            .map(|j| fake_fit(&format!("b{j}"), pseudo_scores(40, 2, j), DMatrix::identity(2, 2), vec![0.0; 2]))
            .collect();
        let st = stack_scores(&fits).unwrap();
        let w = weight_matrix(&st).unwrap();
        let d = st.psi.ncols();
        let mut oracle = vec![vec![0.0; d]; d];
        for i in 0..st.psi.nrows() {
            for a in 0..d {
                for b in 0..d {
                    oracle[a][b] += st.psi[(i, a)] * st.psi[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                assert!((w.v_hat[(a, b)] - oracle[a][b] / 40.0).abs() < 1e-12);
            }
        }
        let eye = &w.v_hat * &w.v_hat_inv;
        assert!((eye - DMatrix::identity(d, d)).amax() < 1e-9);
    }

    #[test]
    fn weight_matrix_ridge_on_duplicate_columns() {
        let a = pseudo_scores(10, 1, 4);
        let s = DMatrix::identity(1, 1);
        let fits = vec![fake_fit("a", a.clone(), s.clone(), vec![0.0]), fake_fit("b", a, s, vec![0.0])];
        let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
        assert!(w.ridge_used > 0.0);
        let ridged = &w.v_hat + DMatrix::identity(2, 2) * w.ridge_used;
        assert!(ridged.cholesky().is_some());
    }

    #[test]
    fn weight_matrix_singular_error() {
        let zero = DMatrix::zeros(5, 1);
        let fits = vec![fake_fit("a", zero, DMatrix::identity(1, 1), vec![0.0])];
        assert!(matches!(weight_matrix(&stack_scores(&fits).unwrap()), Err(DimmError::SingularWeight { .. })));
    }

    #[test]
    fn single_block_collapses() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let fit = fake_fit("a", pseudo_scores(30, 2, 9), s.clone(), vec![0.7, -0.2]);
        let w = weight_matrix(&stack_scores(std::slice::from_ref(&fit)).unwrap()).unwrap();
        let beta = one_step_estimator(std::slice::from_ref(&fit), &w).unwrap();
        assert!((beta[0] - 0.7).abs() < 1e-12 && (beta[1] + 0.2).abs() < 1e-12);
        let cov = dimm_covariance(std::slice::from_ref(&fit), &w).unwrap();
        let want = (s.clone() * &w.v_hat_inv * &s * 30.0).try_inverse().unwrap();
        assert!((cov - want).amax() < 1e-12);
    }

    #[test]
    fn consensus_blocks() {
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let fits: Vec<_> =
            (0..3).map(|j| fake_fit(&format!("b{j}"), pseudo_scores(50, 2, j), s.clone(), vec![1.1, 0.4])).collect();
        let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
        let beta = one_step_estimator(&fits, &w).unwrap();
        assert!((beta[0] - 1.1).abs() < 1e-12 && (beta[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn covariance_homogeneity_and_bread_paths() {
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let fits: Vec<_> = (0..3)
            .map(|j| fake_fit(&format!("b{j}"), pseudo_scores(50, 2, j), s.clone() * (1.0 + j as f64), vec![0.0; 2]))
            .collect();
        let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
        let cov = dimm_covariance(&fits, &w).unwrap();
        let doubled: Vec<_> =
            fits.iter().map(|f| BlockFit { subject_scores: &f.subject_scores * 2.0, ..f.clone() }).collect();
        let w2 = weight_matrix(&stack_scores(&doubled).unwrap()).unwrap();
        let cov2 = dimm_covariance(&doubled, &w2).unwrap();
        assert!((cov2 - cov * 4.0).amax() < 1e-12);

        let a = godambe_bread(&fits, &w).unwrap();
        let b = godambe_bread_stacked(&fits, &w).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn quadratic_form_identity_weight() {
        let w = WeightMatrix {
            v_hat: DMatrix::identity(2, 2),
            v_hat_inv: DMatrix::identity(2, 2),
            ridge_used: 0.0,
            small_sample: false,
        };
        let psi = DVector::from_vec(vec![0.3, -0.4]);
        assert!((quadratic_form(&psi, &w, 10) - 10.0 * (0.09 + 0.16)).abs() < 1e-14);
    }

    #[test]
    fn gof_values() {
        assert_eq!(gof_test(0.0, 3, 2).unwrap(), (4, 1.0));
        let (df, pv) = gof_test(9.487729036781154, 5, 1).unwrap();
        assert_eq!(df, 4);
        assert!((pv - 0.05).abs() < 1e-12);
        let (_, pv) = gof_test(3.841458820694124, 2, 1).unwrap();
        assert!((pv - 0.05).abs() < 1e-12);
        assert!(matches!(gof_test(1.0, 1, 3), Err(DimmError::TestUndefined(_))));
    }

    #[test]
    fn wald_values() {
        let beta = DVector::from_vec(vec![0.0, 1.96]);
        let cov = DMatrix::identity(2, 2);
        let t = wald_tests(&beta, &cov).unwrap();
        assert_eq!(t[0].z, 0.0);
        assert_eq!(t[0].p_value, 1.0);
        assert!((t[1].p_value - 0.05).abs() < 1e-4);
        assert!((t[1].ci_lower - 0.0).abs() < 1e-15 && (t[1].ci_upper - 3.92).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(wald_tests(&beta, &bad).is_err());
    }

    fn arb_fits() -> impl proptest::strategy::Strategy<Value = Vec<BlockFit>> {
        use proptest::prelude::*;
        (1usize..4, 1usize..3, 20usize..40).prop_flat_map(|(j, p, n)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(-1.0f64..1.0, n * p),
                    proptest::collection::vec(-1.0f64..1.0, p * p),
                    proptest::collection::vec(-2.0f64..2.0, p),
                ),
                j,
            )
            .prop_map(move |blocks| {
                blocks
                    .into_iter()
                    .enumerate()
                    .map(|(b, (scores, a, beta))| {
                        let a = DMatrix::from_vec(p, p, a);
                        let sens = &a * a.transpose() + DMatrix::identity(p, p);
                        fake_fit(&format!("b{b}"), DMatrix::from_vec(n, p, scores), sens, beta)
                    })
                    .collect()
            })
        })
    }

    proptest::proptest! {
        #[test]
        fn weight_matrix_symmetric_psd(fits in arb_fits()) {
            let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
            proptest::prop_assert_eq!(&w.v_hat, &w.v_hat.transpose());
            let eig = w.v_hat.clone().symmetric_eigen().eigenvalues;
            proptest::prop_assert!(eig.iter().all(|&v| v >= -1e-12 * w.v_hat.amax()));
            let shifted = &w.v_hat + DMatrix::identity(w.v_hat.nrows(), w.v_hat.nrows()) * w.ridge_used;
            proptest::prop_assert!(shifted.cholesky().is_some());
        }

        #[test]
        fn godambe_paths_agree(fits in arb_fits()) {
            let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
            let a = godambe_bread(&fits, &w).unwrap();
            let b = godambe_bread_stacked(&fits, &w).unwrap();
            proptest::prop_assert!((&a - &b).amax() <= 1e-12 * a.amax().max(1.0));
            let cov = dimm_covariance(&fits, &w).unwrap();
            let n = fits[0].n_subjects() as f64;
            let direct = (b * n).try_inverse().unwrap();
            proptest::prop_assert!((&cov - &direct).amax() <= 1e-12 * cov.amax().max(1e-300) * 1e3);
        }
    }
}
