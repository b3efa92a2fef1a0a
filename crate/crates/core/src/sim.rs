//! Monte-Carlo harness: scenario description, data generation under a
//! between/within block covariance, replicate execution for DIMM and the
//! baselines, and summary metrics.

use cpu_time::ThreadTime;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gee_fit, GlsOracle, WorkingCorrelation};
use crate::distributions::chi2_quantile;
use crate::error::{DimmError, Result};
use crate::model::{
    assemble_kronecker, departition, partition_dataset, BlockPartition, BlockSpec, DependenceKind, PanelDataset,
    Structure,
};
use crate::pairwise::FitOptions;
use crate::pipeline::{run_dimm, select_blocks};

pub const SCHEMA_VERSION: u32 = 1;

/// Maximum share of failed replicates per method before the scenario is
/// declared failed.
pub const MAX_FAILURE_RATE: f64 = 0.05;

const Z_975: f64 = 1.96;
const GOF_PROBS: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];

/// Covariance of a row-varying Gaussian covariate across the M positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RowCovariance {
    Ar1 { rho: f64 },
    Exchangeable { rho: f64 },
    Explicit { matrix: Vec<Vec<f64>> },
}

/// One covariate column. Subject-level draws are broadcast down the M
/// rows; `mv_normal_rows` and `alternating01` vary within a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateRecipe {
    StandardNormal,
    Bernoulli {
        q: f64,
    },
    /// Category index 1..K drawn with the given probabilities, used as a
    /// single numeric column.
    Categorical {
        probs: Vec<f64>,
    },
    Uniform01,
    /// Product of two earlier covariates (zero-based, intercept excluded).
    Interaction {
        a: usize,
        b: usize,
    },
    MvNormalRows {
        covariance: RowCovariance,
    },
    /// 0, 1, 0, 1, … down the rows.
    Alternating01,
}

/// Between-block factor S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetweenBlock {
    Identity,
    Explicit {
        matrix: Vec<Vec<f64>>,
    },
    /// Correlation matrix of a seeded Gaussian Gram matrix, off-diagonals
    /// multiplied by `offdiag_scale`, eigenvalues floored at `eigen_floor`,
    /// then rescaled to unit diagonal.
    Random {
        seed: u64,
        eigen_floor: f64,
        offdiag_scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimMethod {
    /// DIMM with each block's own structure from the partition.
    #[serde(rename = "DIMM")]
    Dimm,
    #[serde(rename = "DIMM_AR1")]
    DimmAr1,
    #[serde(rename = "DIMM_CS")]
    DimmCs,
    #[serde(rename = "GEE_IND")]
    GeeInd,
    #[serde(rename = "GEE_CS")]
    GeeCs,
    #[serde(rename = "GLS_ORACLE")]
    GlsOracle,
}

impl SimMethod {
    pub fn label(self) -> &'static str {
        match self {
            SimMethod::Dimm => "DIMM",
            SimMethod::DimmAr1 => "DIMM_AR1",
            SimMethod::DimmCs => "DIMM_CS",
            SimMethod::GeeInd => "GEE_IND",
            SimMethod::GeeCs => "GEE_CS",
            SimMethod::GlsOracle => "GLS_ORACLE",
        }
    }

    pub fn is_dimm(self) -> bool {
        matches!(self, SimMethod::Dimm | SimMethod::DimmAr1 | SimMethod::DimmCs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub schema_version: u32,
    pub name: String,
    pub n_subjects: usize,
    /// Prepend a column of ones.
    pub intercept: bool,
    pub beta0: Vec<f64>,
    pub covariates: Vec<CovariateRecipe>,
    /// Block layout; each block's structure is the one fitted by `DIMM`.
    pub partition: Vec<BlockSpec>,
    /// True within-block dependence: one entry for all blocks or one per block.
    pub within: Vec<DependenceKind>,
    pub between: BetweenBlock,
    pub methods: Vec<SimMethod>,
    pub n_replicates: usize,
    pub seed: u64,
    /// Restrict every method to these blocks (sub-group analysis).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrate_blocks: Option<Vec<String>>,
    #[serde(default)]
    pub fit_options: FitOptions,
}

impl SimScenario {
    pub fn n_covariates(&self) -> usize {
        self.covariates.len() + usize::from(self.intercept)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DimmError::Scenario(format!("scenario `{}`: {msg}", self.name)));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let p = self.n_covariates();
        if self.beta0.len() != p {
            return bad(format!("beta0 has {} entries but the design has {p} columns", self.beta0.len()));
        }
        if self.beta0.iter().any(|b| !b.is_finite()) {
            return bad("beta0 has a non-finite entry".into());
        }
        if self.n_subjects <= p {
            return bad(format!("n_subjects {} must exceed the {p} covariates", self.n_subjects));
        }
        if self.n_replicates < 2 {
            return bad("need at least 2 replicates".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        for (c, recipe) in self.covariates.iter().enumerate() {
            match recipe {
                CovariateRecipe::Bernoulli { q } if !(0.0..=1.0).contains(q) => {
                    return bad(format!("covariates[{c}]: bernoulli q = {q} not in [0, 1]"));
                }
                CovariateRecipe::Categorical { probs } => {
                    let sum: f64 = probs.iter().sum();
                    if probs.is_empty() || probs.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                        return bad(format!(
                            "covariates[{c}]: categorical probabilities must be nonnegative and sum to 1"
                        ));
                    }
                }
                CovariateRecipe::Interaction { a, b } if *a >= c || *b >= c => {
                    return bad(format!(
                        "covariates[{c}]: interaction must refer to earlier covariates, got ({a}, {b})"
                    ));
                }
                _ => {}
            }
        }
        let partition = BlockPartition::new(self.partition.clone())?;
        if self.within.len() != 1 && self.within.len() != partition.len() {
            return bad(format!(
                "within has {} entries; expected 1 or one per block ({})",
                self.within.len(),
                partition.len()
            ));
        }
        if let Some(names) = &self.integrate_blocks {
            select_blocks(&partition, names)?;
        }
        Ok(())
    }

    fn within_per_block(&self) -> Vec<DependenceKind> {
        if self.within.len() == 1 {
            vec![self.within[0]; self.partition.len()]
        } else {
            self.within.clone()
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(DimmError::Scenario(format!("{what} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = m.diagonal().iter().map(|v| 1.0 / v.sqrt()).collect();
    let out = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j]);
    (&out + out.transpose()) * 0.5
}

/// Seeded random correlation-like PD matrix (see [`BetweenBlock::Random`]).
pub fn random_between_block(j: usize, seed: u64, eigen_floor: f64, offdiag_scale: f64) -> Result<DMatrix<f64>> {
    if !(eigen_floor > 0.0 && eigen_floor < 1.0) || !(0.0..=1.0).contains(&offdiag_scale) {
        return Err(DimmError::Scenario(format!(
            "random between-block recipe needs eigen_floor in (0, 1) and offdiag_scale in [0, 1], got {eigen_floor}, {offdiag_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(j, j, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut c = to_unit_diagonal(&(&g * g.transpose()));
    for a in 0..j {
        for b in 0..j {
            if a != b {
                c[(a, b)] *= offdiag_scale;
            }
        }
    }
    let eig = c.symmetric_eigen();
    let floored = eig.eigenvalues.map(|v| v.max(eigen_floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    Ok(to_unit_diagonal(&rebuilt))
}

fn resolve_between(between: &BetweenBlock, j: usize) -> Result<DMatrix<f64>> {
    let s = match between {
        BetweenBlock::Identity => DMatrix::identity(j, j),
        BetweenBlock::Explicit { matrix } => matrix_from_rows(matrix, "between.matrix")?,
        BetweenBlock::Random { seed, eigen_floor, offdiag_scale } => {
            random_between_block(j, *seed, *eigen_floor, *offdiag_scale)?
        }
    };
    if s.nrows() != j {
        return Err(DimmError::Scenario(format!("between-block matrix is {0}x{0} for {j} blocks", s.nrows())));
    }
    Ok(s)
}

fn row_covariance(spec: &RowCovariance, m: usize) -> Result<DMatrix<f64>> {
    match spec {
        RowCovariance::Ar1 { rho } => Structure::Ar1
            .with_params(1.0, *rho)
            .validate(m)
            .map(|_| DMatrix::from_fn(m, m, |r, t| rho.powi((r as i32 - t as i32).abs()))),
        RowCovariance::Exchangeable { rho } => Structure::Cs
            .with_params(1.0, *rho)
            .validate(m)
            .map(|_| DMatrix::from_fn(m, m, |r, t| if r == t { 1.0 } else { *rho })),
        RowCovariance::Explicit { matrix } => {
            let s = matrix_from_rows(matrix, "mv_normal_rows covariance")?;
            if s.nrows() != m {
                return Err(DimmError::Scenario(format!(
                    "mv_normal_rows covariance is {0}x{0} but M = {m}",
                    s.nrows()
                )));
            }
            Ok(s)
        }
    }
}

/// A validated scenario with its covariance factors computed once.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub scenario: SimScenario,
    pub partition: BlockPartition,
    pub between_block: DMatrix<f64>,
    /// Full M×M response covariance.
    pub sigma: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    row_factors: Vec<Option<DMatrix<f64>>>,
    /// Indices of the analysed blocks.
    analysis_blocks: Vec<usize>,
}

impl PreparedScenario {
    pub fn new(scenario: &SimScenario) -> Result<Self> {
        scenario.validate()?;
        let partition = BlockPartition::new(scenario.partition.clone())?;
        let between_block = resolve_between(&scenario.between, partition.len())?;
        let sigma = assemble_kronecker(&between_block, &scenario.within_per_block(), &partition.sizes())?;
        let noise_factor = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| DimmError::Covariance("response covariance is not positive definite".into()))?
            .unpack();
        let m = partition.total_dim();
        let row_factors = scenario
            .covariates
            .iter()
            .map(|c| match c {
                CovariateRecipe::MvNormalRows { covariance } => {
                    let s = row_covariance(covariance, m)?;
                    let l = Cholesky::<f64, Dyn>::new(s).ok_or_else(|| {
                        DimmError::Scenario("mv_normal_rows covariance is not positive definite".into())
                    })?;
                    Ok(Some(l.unpack()))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        let analysis_blocks = match &scenario.integrate_blocks {
            Some(names) => select_blocks(&partition, names)?,
            None => (0..partition.len()).collect(),
        };
        Ok(Self {
            scenario: scenario.clone(),
            partition,
            between_block,
            sigma,
            noise_factor,
            row_factors,
            analysis_blocks,
        })
    }

    pub fn response_dim(&self) -> usize {
        self.partition.total_dim()
    }

    /// Full-dimension dataset for replicate `rep`; depends only on
    /// (seed, rep).
    pub fn generate(&self, rep: usize) -> Result<PanelDataset> {
        let scn = &self.scenario;
        let (n, m, p) = (scn.n_subjects, self.response_dim(), scn.n_covariates());
        let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
        rng.set_stream(rep as u64);

        let mut x = vec![0.0; n * m * p];
        let mut y = vec![0.0; n * m];
        let offset = usize::from(scn.intercept);
        let mut cols = vec![vec![0.0; m]; scn.covariates.len()];
        for i in 0..n {
            for (c, recipe) in scn.covariates.iter().enumerate() {
                let col = match recipe {
                    CovariateRecipe::StandardNormal => vec![rng.sample::<f64, _>(StandardNormal); m],
                    CovariateRecipe::Bernoulli { q } => vec![f64::from(u8::from(rng.random::<f64>() < *q)); m],
                    CovariateRecipe::Categorical { probs } => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut k = probs.len();
                        for (idx, pr) in probs.iter().enumerate() {
                            acc += pr;
                            if u < acc {
                                k = idx + 1;
                                break;
                            }
                        }
                        vec![k as f64; m]
                    }
                    CovariateRecipe::Uniform01 => vec![rng.random::<f64>(); m],
                    CovariateRecipe::Interaction { a, b } => {
                        cols[*a].iter().zip(&cols[*b]).map(|(u, v)| u * v).collect()
                    }
                    CovariateRecipe::MvNormalRows { .. } => {
                        let l = self.row_factors[c].as_ref().expect("prepared row factor");
                        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                        (l * z).iter().copied().collect()
                    }
                    CovariateRecipe::Alternating01 => (0..m).map(|r| (r % 2) as f64).collect(),
                };
                cols[c] = col;
            }
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = &self.noise_factor * z;
            for r in 0..m {
                let row = &mut x[(i * m + r) * p..(i * m + r + 1) * p];
                if scn.intercept {
                    row[0] = 1.0;
                }
                for (c, col) in cols.iter().enumerate() {
                    row[offset + c] = col[r];
                }
                let mean: f64 = row.iter().zip(&scn.beta0).map(|(a, b)| a * b).sum();
                y[i * m + r] = mean + noise[r];
            }
        }
        PanelDataset::from_raw(n, m, p, y, x)
    }

    /// The analysed part of a generated dataset with its partition.
    pub fn analysis_view(&self, full: &PanelDataset) -> Result<(PanelDataset, BlockPartition)> {
        if self.analysis_blocks.len() == self.partition.len() {
            return Ok((full.clone(), self.partition.clone()));
        }
        let parts = partition_dataset(full, &self.partition)?;
        let chosen: Vec<PanelDataset> = self.analysis_blocks.iter().map(|&j| parts[j].clone()).collect();
        let specs = self.analysis_blocks.iter().map(|&j| self.partition.blocks()[j].clone()).collect();
        Ok((departition(&chosen)?, BlockPartition::new(specs)?))
    }

    /// Covariance of the analysed coordinates.
    pub fn analysis_sigma(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = self
            .analysis_blocks
            .iter()
            .flat_map(|&j| {
                let start = self.partition.offsets()[j];
                start..start + self.partition.blocks()[j].size
            })
            .collect();
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.sigma[(idx[a], idx[b])])
    }
}

pub fn generate_replicate(scn: &SimScenario, rep_index: usize) -> Result<PanelDataset> {
    PreparedScenario::new(scn)?.generate(rep_index)
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub method: SimMethod,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Q_N at the DIMM estimate.
    pub q_stat: Option<f64>,
    pub error: Option<String>,
    pub cpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub index: usize,
    pub truth: f64,
    pub bias: f64,
    pub ese: f64,
    pub ase: f64,
    pub rmse: f64,
    pub coverage: f64,
    /// Share of replicates rejecting H₀: β_q = 0 at level 0.05.
    pub rejection_rate: f64,
    /// Same as `rejection_rate` when the true value is 0.
    pub type_one_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub prob: f64,
    pub empirical: f64,
    pub theoretical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofSummary {
    pub df: usize,
    pub mean_q: f64,
    pub var_q: f64,
    /// Share of replicates with Q_N above the χ²_df 0.95 quantile.
    pub rejection_rate: f64,
    pub quantiles: Vec<QuantilePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: SimMethod,
    pub n_success: usize,
    pub n_failed: usize,
    /// Up to five distinct failure messages.
    pub failures: Vec<String>,
    pub coefficients: Vec<CoefficientSummary>,
    pub gof: Option<GofSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: SimMethod,
    pub total_cpu_seconds: f64,
    pub mean_cpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub n_subjects: usize,
    pub response_dim: usize,
    pub n_replicates: usize,
    /// Resolved between-block factor S.
    pub between_block: Vec<Vec<f64>>,
    pub methods: Vec<MethodSummary>,
    /// Machine-dependent; excluded from determinism comparisons.
    pub timing: Vec<MethodTiming>,
}

impl SimReport {
    pub fn method(&self, m: SimMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    /// The report with timing removed.
    pub fn without_timing(&self) -> SimReport {
        SimReport { timing: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    pub records: Vec<ReplicateRecord>,
}

/// Linear-interpolation sample quantile of sorted data.
pub fn sample_quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn run_method(
    method: SimMethod,
    prep: &PreparedScenario,
    data: &PanelDataset,
    partition: &BlockPartition,
    oracle: Option<&GlsOracle>,
) -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
    let opts = &prep.scenario.fit_options;
    let dimm = |part: &BlockPartition| -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
        let fit = run_dimm(data, part, opts, None)?;
        let it = fit.integrated;
        Ok((it.beta_dimm.iter().copied().collect(), it.std_errors(), Some(it.q_stat)))
    };
    let baseline = |fit: crate::baselines::BaselineFit| -> Result<(Vec<f64>, Vec<f64>, Option<f64>)> {
        if !fit.converged {
            return Err(DimmError::FitFailed {
                block: format!("{:?}", fit.method),
                trace: format!("no convergence after {} iterations", fit.iterations),
            });
        }
        Ok((fit.beta_hat.iter().copied().collect(), fit.std_errors(), None))
    };
    match method {
        SimMethod::Dimm => dimm(partition),
        SimMethod::DimmAr1 => dimm(&partition.with_structure(Structure::Ar1)),
        SimMethod::DimmCs => dimm(&partition.with_structure(Structure::Cs)),
        SimMethod::GeeInd => baseline(gee_fit(data, WorkingCorrelation::Independence)?),
        SimMethod::GeeCs => baseline(gee_fit(data, WorkingCorrelation::Exchangeable)?),
        SimMethod::GlsOracle => baseline(oracle.expect("oracle prepared").fit(data)?),
    }
}

fn run_replicate(prep: &PreparedScenario, rep: usize, oracle: Option<&GlsOracle>) -> Result<Vec<ReplicateRecord>> {
    let full = prep.generate(rep)?;
    let (data, partition) = prep.analysis_view(&full)?;
    Ok(prep
        .scenario
        .methods
        .iter()
        .map(|&method| {
            let start = ThreadTime::now();
            let out = run_method(method, prep, &data, &partition, oracle);
            let cpu_seconds = start.elapsed().as_secs_f64();
            match out {
                Ok((estimates, std_errors, q_stat)) => {
                    ReplicateRecord { rep, method, estimates, std_errors, q_stat, error: None, cpu_seconds }
                }
                Err(e) => ReplicateRecord {
                    rep,
                    method,
                    estimates: Vec::new(),
                    std_errors: Vec::new(),
                    q_stat: None,
                    error: Some(e.to_string()),
                    cpu_seconds,
                },
            }
        })
        .collect())
}

/// BIAS, ESE (denominator R − 1), ASE, RMSE, 95% coverage and the
/// rejection rate of H₀: β_q = 0 from per-replicate estimates and SEs.
pub fn coefficient_metrics(index: usize, truth: f64, est: &[f64], se: &[f64]) -> CoefficientSummary {
    let r = est.len() as f64;
    let mean = est.iter().sum::<f64>() / r;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let covered = est.iter().zip(se).filter(|(e, s)| (*e - truth).abs() <= Z_975 * *s).count();
    let rejected = est.iter().zip(se).filter(|(e, s)| e.abs() > Z_975 * *s).count();
    let rejection_rate = rejected as f64 / r;
    CoefficientSummary {
        index,
        truth,
        bias: mean - truth,
        ese: var.sqrt(),
        ase: se.iter().sum::<f64>() / r,
        rmse: (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r).sqrt(),
        coverage: covered as f64 / r,
        rejection_rate,
        type_one_error: (truth == 0.0).then_some(rejection_rate),
    }
}

fn summarize(prep: &PreparedScenario, method: SimMethod, records: &[&ReplicateRecord]) -> Result<MethodSummary> {
    let scn = &prep.scenario;
    let ok: Vec<&ReplicateRecord> = records.iter().copied().filter(|r| r.error.is_none()).collect();
    let n_failed = records.len() - ok.len();
    let mut failures: Vec<String> = Vec::new();
    for r in records.iter().filter_map(|r| r.error.as_ref()) {
        if failures.len() < 5 && !failures.contains(r) {
            failures.push(r.clone());
        }
    }
    if n_failed as f64 > MAX_FAILURE_RATE * records.len() as f64 || ok.len() < 2 {
        return Err(DimmError::Scenario(format!(
            "scenario `{}`: method {} failed on {n_failed} of {} replicates (first: {})",
            scn.name,
            method.label(),
            records.len(),
            failures.first().map(String::as_str).unwrap_or("none")
        )));
    }
    let r = ok.len() as f64;
    let coefficients = scn
        .beta0
        .iter()
        .enumerate()
        .map(|(q, &truth)| {
            let est: Vec<f64> = ok.iter().map(|rec| rec.estimates[q]).collect();
            let se: Vec<f64> = ok.iter().map(|rec| rec.std_errors[q]).collect();
            coefficient_metrics(q, truth, &est, &se)
        })
        .collect();
    let n_blocks = prep.analysis_blocks.len();
    let gof = if method.is_dimm() && n_blocks >= 2 {
        let df = (n_blocks - 1) * scn.n_covariates();
        let mut q: Vec<f64> = ok.iter().filter_map(|rec| rec.q_stat).collect();
        q.sort_by(f64::total_cmp);
        let mean_q = q.iter().sum::<f64>() / r;
        let var_q = q.iter().map(|v| (v - mean_q).powi(2)).sum::<f64>() / (r - 1.0);
        let crit = chi2_quantile(0.95, df as f64)?;
        let quantiles = GOF_PROBS
            .iter()
            .map(|&prob| {
                Ok(QuantilePair {
                    prob,
                    empirical: sample_quantile(&q, prob),
                    theoretical: chi2_quantile(prob, df as f64)?,
                })
            })
            .collect::<Result<_>>()?;
        Some(GofSummary {
            df,
            mean_q,
            var_q,
            rejection_rate: q.iter().filter(|&&v| v > crit).count() as f64 / r,
            quantiles,
        })
    } else {
        None
    };
    Ok(MethodSummary { method, n_success: ok.len(), n_failed, failures, coefficients, gof })
}

/// Runs every replicate on a pool of `workers` threads and aggregates.
/// Replicates are collected in index order, so the report does not depend
/// on the worker count.
pub fn run_scenario(scn: &SimScenario, workers: usize) -> Result<SimOutcome> {
    let prep = PreparedScenario::new(scn)?;
    let oracle =
        if scn.methods.contains(&SimMethod::GlsOracle) { Some(GlsOracle::new(&prep.analysis_sigma())?) } else { None };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| DimmError::Scenario(format!("cannot start worker pool: {e}")))?;
    let per_rep: Vec<Vec<ReplicateRecord>> = pool.install(|| {
        (0..scn.n_replicates)
            .into_par_iter()
            .map(|rep| run_replicate(&prep, rep, oracle.as_ref()))
            .collect::<Result<_>>()
    })?;
    let records: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();

    let mut methods = Vec::new();
    let mut timing = Vec::new();
    for &method in &scn.methods {
        let mine: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
        methods.push(summarize(&prep, method, &mine)?);
        let total: f64 = mine.iter().map(|r| r.cpu_seconds).sum();
        timing.push(MethodTiming { method, total_cpu_seconds: total, mean_cpu_seconds: total / mine.len() as f64 });
    }
    let report = SimReport {
        schema_version: SCHEMA_VERSION,
        scenario: scn.name.clone(),
        seed: scn.seed,
        n_subjects: scn.n_subjects,
        response_dim: prep.response_dim(),
        n_replicates: scn.n_replicates,
        between_block: rows_of(&prep.between_block),
        methods,
        timing,
    };
    Ok(SimOutcome { report, records })
}

pub const EEG_REGIONS: [(&str, usize); 6] = [("lfc", 7), ("mfc", 7), ("rfc", 7), ("lpo", 8), ("mpo", 9), ("rpo", 8)];
pub const EEG_ERPS: [&str; 3] = ["P2", "P750", "LSW"];
/// Left parietal-occipital region in P2 and P750.
pub const EEG_SUBGROUP: [&str; 2] = ["lpo_P2", "lpo_P750"];

/// Synthetic scenario with the layout of the infant EEG study: 157
/// subjects, 6 regions × 3 ERPs = 18 blocks named `<region>_<erp>`,
/// covariates (intercept, age, voice, sufficiency) and exchangeable
/// dependence within blocks. Numeric settings are illustrative defaults.
/// Analyses are restricted to [`EEG_SUBGROUP`]; set `integrate_blocks` to
/// `None` to integrate all 18 blocks, which is poorly conditioned at N = 157.
pub fn eeg_mimic_scenario() -> SimScenario {
    let partition = EEG_ERPS
        .iter()
        .flat_map(|erp| {
            EEG_REGIONS.iter().map(move |(region, size)| BlockSpec {
                name: format!("{region}_{erp}"),
                size: *size,
                structure: Structure::Cs,
            })
        })
        .collect();
    SimScenario {
        schema_version: SCHEMA_VERSION,
        name: "eeg_mimic".into(),
        n_subjects: 157,
        intercept: true,
        beta0: vec![0.0, 0.1, 0.05, -0.2],
        covariates: vec![
            CovariateRecipe::Uniform01,
            CovariateRecipe::Alternating01,
            CovariateRecipe::Bernoulli { q: 0.32 },
        ],
        partition,
        within: vec![DependenceKind::Cs { sigma: 1.0, rho: 0.5 }],
        between: BetweenBlock::Random { seed: 157, eigen_floor: 0.1, offdiag_scale: 0.8 },
        methods: vec![SimMethod::Dimm, SimMethod::GeeCs],
        n_replicates: 100,
        seed: 2018,
        integrate_blocks: Some(EEG_SUBGROUP.iter().map(|s| s.to_string()).collect()),
        fit_options: FitOptions::default(),
    }
}
