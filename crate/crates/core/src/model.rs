//! Domain types shared by every stage: the panel of correlated responses,
//! the block partition of the response coordinates, within-block dependence
//! structures and the nested between/within block covariance used for
//! simulation.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{DimmError, Result};

/// N subjects, each with an M-vector response and an M×p covariate matrix.
///
/// Storage is row-major: response `(i, r)` lives at `i * M + r`, covariate
/// `(i, r, k)` at `(i * M + r) * p + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_subjects: usize,
    response_dim: usize,
    n_covariates: usize,
    responses: Vec<f64>,
    covariates: Vec<f64>,
}

impl PanelDataset {
    /// Builds a dataset from row-major buffers, validating every invariant.
    pub fn from_raw(
        n_subjects: usize,
        response_dim: usize,
        n_covariates: usize,
        responses: Vec<f64>,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        if n_subjects < 2 {
            return Err(DimmError::Dataset(format!("need at least 2 subjects, got {n_subjects}")));
        }
        if response_dim < 2 {
            return Err(DimmError::Dataset(format!("response dimension must be at least 2, got {response_dim}")));
        }
        if n_covariates < 1 {
            return Err(DimmError::Dataset("need at least one covariate column".into()));
        }
        if responses.len() != n_subjects * response_dim {
            return Err(DimmError::Dataset(format!(
                "responses hold {} values, expected N*M = {}",
                responses.len(),
                n_subjects * response_dim
            )));
        }
        if covariates.len() != n_subjects * response_dim * n_covariates {
            return Err(DimmError::Dataset(format!(
                "covariates hold {} values, expected N*M*p = {}",
                covariates.len(),
                n_subjects * response_dim * n_covariates
            )));
        }
        if let Some(pos) = responses.iter().position(|v| !v.is_finite()) {
            return Err(DimmError::Dataset(format!(
                "non-finite response at subject {}, position {}",
                pos / response_dim,
                pos % response_dim
            )));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            let row = pos / n_covariates;
            return Err(DimmError::Dataset(format!(
                "non-finite covariate {} at subject {}, position {}",
                pos % n_covariates,
                row / response_dim,
                row % response_dim
            )));
        }
        Ok(Self { n_subjects, response_dim, n_covariates, responses, covariates })
    }

    /// Builds a dataset from an N×M response matrix and one M×p covariate
    /// matrix per subject.
    pub fn from_matrices(responses: &DMatrix<f64>, covariates: &[DMatrix<f64>]) -> Result<Self> {
        let (n, m) = responses.shape();
        if covariates.len() != n {
            return Err(DimmError::Dataset(format!("{} covariate matrices for {} subjects", covariates.len(), n)));
        }
        let p = covariates.first().map_or(0, |x| x.ncols());
        let mut y = Vec::with_capacity(n * m);
        let mut x = Vec::with_capacity(n * m * p);
        for (i, xi) in covariates.iter().enumerate() {
            if xi.shape() != (m, p) {
                return Err(DimmError::Dataset(format!(
                    "subject {i}: covariate matrix is {}x{}, expected {m}x{p}",
                    xi.nrows(),
                    xi.ncols()
                )));
            }
            y.extend(responses.row(i).iter());
            for r in 0..m {
                x.extend(xi.row(r).iter());
            }
        }
        Self::from_raw(n, m, p, y, x)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn response_dim(&self) -> usize {
        self.response_dim
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Response vector of subject `i`.
    pub fn response(&self, i: usize) -> &[f64] {
        let m = self.response_dim;
        &self.responses[i * m..(i + 1) * m]
    }

    /// Covariate row (length p) of subject `i` at coordinate `r`.
    pub fn covariate_row(&self, i: usize, r: usize) -> &[f64] {
        let p = self.n_covariates;
        let start = (i * self.response_dim + r) * p;
        &self.covariates[start..start + p]
    }

    /// Subject `i`'s full M×p covariate block, row-major.
    pub fn covariate_block(&self, i: usize) -> &[f64] {
        let len = self.response_dim * self.n_covariates;
        &self.covariates[i * len..(i + 1) * len]
    }

    pub fn responses_raw(&self) -> &[f64] {
        &self.responses
    }

    pub fn covariates_raw(&self) -> &[f64] {
        &self.covariates
    }

    /// Subject `i`'s covariate matrix Xᵢ as an M×p matrix.
    pub fn covariate_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.response_dim, self.n_covariates, self.covariate_block(i))
    }

    /// The N×M response matrix.
    pub fn response_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_subjects, self.response_dim, &self.responses)
    }

    /// Restricts the dataset to the contiguous coordinate range `start..start+len`.
    pub fn slice_coordinates(&self, start: usize, len: usize) -> Result<Self> {
        if len < 2 || start + len > self.response_dim {
            return Err(DimmError::Partition(format!(
                "coordinate range {start}..{} invalid for M = {}",
                start + len,
                self.response_dim
            )));
        }
        let p = self.n_covariates;
        let mut y = Vec::with_capacity(self.n_subjects * len);
        let mut x = Vec::with_capacity(self.n_subjects * len * p);
        for i in 0..self.n_subjects {
            y.extend_from_slice(&self.response(i)[start..start + len]);
            let base = (i * self.response_dim + start) * p;
            x.extend_from_slice(&self.covariates[base..base + len * p]);
        }
        Self::from_raw(self.n_subjects, len, p, y, x)
    }
}

/// Within-block correlation family, without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Autoregressive: correlation ρ^lag.
    Ar1,
    /// Compound symmetry (exchangeable): correlation ρ at every lag.
    Cs,
}

impl Structure {
    /// Open interval of admissible correlations for a block of size `m`.
    pub fn rho_bounds(self, m: usize) -> (f64, f64) {
        match self {
            Structure::Ar1 => (-1.0, 1.0),
            Structure::Cs => {
                let lower = if m > 1 { -1.0 / (m as f64 - 1.0) } else { -1.0 };
                (lower, 1.0)
            }
        }
    }

    pub fn with_params(self, sigma: f64, rho: f64) -> DependenceKind {
        match self {
            Structure::Ar1 => DependenceKind::Ar1 { sigma, rho },
            Structure::Cs => DependenceKind::Cs { sigma, rho },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Ar1 => "AR1",
            Structure::Cs => "CS",
        }
    }
}

/// Within-block dependence with its parameters γ = (σ, ρ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DependenceKind {
    Ar1 { sigma: f64, rho: f64 },
    Cs { sigma: f64, rho: f64 },
}

impl DependenceKind {
    pub fn structure(&self) -> Structure {
        match self {
            DependenceKind::Ar1 { .. } => Structure::Ar1,
            DependenceKind::Cs { .. } => Structure::Cs,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            DependenceKind::Ar1 { sigma, .. } | DependenceKind::Cs { sigma, .. } => sigma,
        }
    }

    pub fn rho(&self) -> f64 {
        match *self {
            DependenceKind::Ar1 { rho, .. } | DependenceKind::Cs { rho, .. } => rho,
        }
    }

    /// Checks σ > 0 and ρ inside the open validity interval for block size `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        let sigma = self.sigma();
        let rho = self.rho();
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(DimmError::Domain(format!("sigma must be positive, got {sigma}")));
        }
        let (lo, hi) = self.structure().rho_bounds(m);
        if !(rho > lo && rho < hi) {
            return Err(DimmError::Domain(format!(
                "{} correlation {rho} outside ({lo}, {hi}) for block size {m}",
                self.structure().name()
            )));
        }
        Ok(())
    }

    /// Correlation between two distinct coordinates `lag` apart.
    pub fn pair_correlation(&self, lag: usize) -> Result<f64> {
        if lag == 0 {
            return Err(DimmError::Domain("pair correlation needs lag >= 1".into()));
        }
        Ok(match *self {
            DependenceKind::Ar1 { rho, .. } => rho.powi(lag as i32),
            DependenceKind::Cs { rho, .. } => rho,
        })
    }

    /// 2×2 covariance of the coordinate pair `lag` apart.
    pub fn pair_covariance(&self, lag: usize) -> Result<PairCovariance> {
        PairCovariance::new(self.sigma(), self.pair_correlation(lag)?)
    }

    /// Full m×m covariance of a block with this structure.
    pub fn block_matrix(&self, m: usize) -> DMatrix<f64> {
        let s2 = self.sigma() * self.sigma();
        DMatrix::from_fn(
            m,
            m,
            |r, t| {
                if r == t {
                    s2
                } else {
                    s2 * self.pair_correlation(r.abs_diff(t)).expect("lag >= 1")
                }
            },
        )
    }
}

/// Correlation between two coordinates `lag` apart under `kind`.
pub fn pair_correlation(kind: &DependenceKind, lag: usize) -> Result<f64> {
    kind.pair_correlation(lag)
}

/// Covariance of a coordinate pair: σ² on the diagonal, σ²c off it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCovariance {
    sigma: f64,
    corr: f64,
}

impl PairCovariance {
    pub fn new(sigma: f64, corr: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(DimmError::Domain(format!("pair sigma must be positive, got {sigma}")));
        }
        if !(corr.abs() < 1.0) {
            return Err(DimmError::Domain(format!("pair correlation {corr} not in (-1, 1)")));
        }
        Ok(Self { sigma, corr })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn corr(&self) -> f64 {
        self.corr
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Entries (a, b) of Ω⁻¹ = [[a, b], [b, a]].
    pub fn inverse_entries(&self) -> (f64, f64) {
        let denom = self.variance() * (1.0 - self.corr * self.corr);
        (1.0 / denom, -self.corr / denom)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.variance().ln() + (1.0 - self.corr * self.corr).ln()
    }
}

/// One named block of contiguous response coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub size: usize,
    pub structure: Structure,
}

/// Ordered split of 1..M into J contiguous blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    blocks: Vec<BlockSpec>,
    offsets: Vec<usize>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<BlockSpec>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(DimmError::Partition("partition has no blocks".into()));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut next = 0;
        for b in &blocks {
            if b.size < 2 {
                return Err(DimmError::Partition(format!(
                    "block `{}` has size {}; pairwise likelihood needs at least 2",
                    b.name, b.size
                )));
            }
            if blocks.iter().filter(|o| o.name == b.name).count() > 1 {
                return Err(DimmError::Partition(format!("duplicate block name `{}`", b.name)));
            }
            offsets.push(next);
            next += b.size;
        }
        Ok(Self { blocks, offsets })
    }

    /// Blocks named `block1..blockJ` sharing one structure.
    pub fn uniform(sizes: &[usize], structure: Structure) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(j, &size)| BlockSpec { name: format!("block{}", j + 1), size, structure })
                .collect(),
        )
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Zero-based start offset of each block.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.size).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Same partition with every block's structure replaced.
    pub fn with_structure(&self, structure: Structure) -> Self {
        let blocks = self.blocks.iter().map(|b| BlockSpec { structure, ..b.clone() }).collect();
        Self { blocks, offsets: self.offsets.clone() }
    }
}

/// Splits the dataset into one dataset per block, in block order.
pub fn partition_dataset(data: &PanelDataset, part: &BlockPartition) -> Result<Vec<PanelDataset>> {
    if part.total_dim() != data.response_dim() {
        return Err(DimmError::Partition(format!(
            "block sizes sum to {} but the response dimension is {}",
            part.total_dim(),
            data.response_dim()
        )));
    }
    part.blocks().iter().zip(part.offsets()).map(|(b, &start)| data.slice_coordinates(start, b.size)).collect()
}

/// Concatenates block datasets coordinate-wise; inverse of [`partition_dataset`].
pub fn departition(blocks: &[PanelDataset]) -> Result<PanelDataset> {
    let first = blocks.first().ok_or_else(|| DimmError::Partition("no blocks to join".into()))?;
    let n = first.n_subjects();
    let p = first.n_covariates();
    if blocks.iter().any(|b| b.n_subjects() != n || b.n_covariates() != p) {
        return Err(DimmError::Partition("blocks disagree on N or p".into()));
    }
    let m: usize = blocks.iter().map(|b| b.response_dim()).sum();
    let mut y = Vec::with_capacity(n * m);
    let mut x = Vec::with_capacity(n * m * p);
    for i in 0..n {
        for b in blocks {
            y.extend_from_slice(b.response(i));
            x.extend_from_slice(b.covariate_block(i));
        }
    }
    PanelDataset::from_raw(n, m, p, y, x)
}

/// Nested covariance: a J×J between-block factor S and a within-block
/// structure per block.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCovariance {
    pub between_block: DMatrix<f64>,
    pub within_block: Vec<DependenceKind>,
    pub sizes: Vec<usize>,
}

impl KroneckerCovariance {
    pub fn new(between_block: DMatrix<f64>, within_block: Vec<DependenceKind>, sizes: Vec<usize>) -> Result<Self> {
        let cov = Self { between_block, within_block, sizes };
        cov.assemble()?;
        Ok(cov)
    }

    pub fn assemble(&self) -> Result<DMatrix<f64>> {
        assemble_kronecker(&self.between_block, &self.within_block, &self.sizes)
    }
}

/// Assembles the M×M covariance whose (j, k) block is `S[j,k] · L_j L_kᵀ`,
/// where `L_j` holds the first m_j rows of the Cholesky factor of block j's
/// within-block matrix at size max(m). Diagonal blocks are exactly
/// `S[j,j] · A_j`; with equal sizes and a shared A the result is the literal
/// Kronecker product S ⊗ A. The construction is `B (S ⊗ I) Bᵀ` with B of
/// full row rank, so a PD S always gives a PD result.
pub fn assemble_kronecker(between: &DMatrix<f64>, within: &[DependenceKind], sizes: &[usize]) -> Result<DMatrix<f64>> {
    let j = sizes.len();
    if between.shape() != (j, j) || within.len() != j || j == 0 {
        return Err(DimmError::Covariance(format!(
            "between-block factor is {}x{}, with {} within specs and {} sizes",
            between.nrows(),
            between.ncols(),
            within.len(),
            j
        )));
    }
    if (between - between.transpose()).amax() > 1e-12 * between.amax().max(1.0) {
        return Err(DimmError::Covariance("between-block factor is not symmetric".into()));
    }
    if Cholesky::new(between.clone()).is_none() {
        return Err(DimmError::Covariance("between-block factor is not positive definite".into()));
    }
    let m_max = *sizes.iter().max().expect("non-empty");
    let mut factors = Vec::with_capacity(j);
    for (b, (kind, &m)) in within.iter().zip(sizes).enumerate() {
        kind.validate(m_max).map_err(|e| DimmError::Covariance(format!("within-block spec {}: {e}", b + 1)))?;
        let chol = Cholesky::new(kind.block_matrix(m_max))
            .ok_or_else(|| DimmError::Covariance(format!("within-block matrix {} is not positive definite", b + 1)))?;
        factors.push(chol.l().rows(0, m).into_owned());
    }
    let total: usize = sizes.iter().sum();
    let mut sigma = DMatrix::zeros(total, total);
    let mut row0 = 0;
    for a in 0..j {
        let mut col0 = 0;
        for b in 0..j {
            let block = &factors[a] * factors[b].transpose() * between[(a, b)];
            sigma.view_mut((row0, col0), (sizes[a], sizes[b])).copy_from(&block);
            col0 += sizes[b];
        }
        row0 += sizes[a];
    }
    // symmetrize away rounding in the off-diagonal products
    let sym = (&sigma + sigma.transpose()) * 0.5;
    if Cholesky::new(sym.clone()).is_none() {
        return Err(DimmError::Covariance("assembled covariance is not positive definite".into()));
    }
    Ok(sym)
}
