//! File formats and the command implementations behind the `dimm` binary.
//!
//! Responses are a CSV file with a header and one row of M values per
//! subject. An optional leading `subject_id` column names the subjects;
//! otherwise they are numbered 1..N in file order. Covariates are a long CSV
//! with columns `subject_id, position, <covariate names…>`, one row per
//! (subject, position) with positions 1..M, in any order.
//!
//! Configs and reports are JSON documents carrying `schema_version`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distributions::chi2_sf;
use crate::error::{DimmError, Result};
use crate::gmm::{cef_log_density, quadratic_form, stack_scores, stacked_mean_score, weight_matrix};
use crate::model::{partition_dataset, BlockPartition, BlockSpec, DependenceKind, PanelDataset};
use crate::pairwise::{FitOptions, OptimizerTrace};
use crate::pipeline::{fit_blocks, run_dimm, select_blocks, DimmFit, PhaseTiming};
use crate::sim::{run_scenario, ReplicateRecord, SimOutcome, SimScenario};

pub use crate::sim::SCHEMA_VERSION;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "DIMM_WORKERS";

fn ingest<T>(msg: String) -> Result<T> {
    Err(DimmError::Ingestion(msg))
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DimmError::Ingestion(format!("{}: {e}", path.display())))
}

fn parse_cell(raw: &str, file: &Path, what: impl Fn() -> String) -> Result<f64> {
    if raw.is_empty() {
        return ingest(format!("{}: missing value at {}", file.display(), what()));
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => ingest(format!("{}: non-numeric value `{raw}` at {}", file.display(), what())),
    }
}

/// A loaded panel with the column names from the files.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPanel {
    pub data: PanelDataset,
    pub subject_ids: Vec<String>,
    pub covariate_names: Vec<String>,
}

/// Reads the response and covariate files described in the module docs.
pub fn load_panel(response_path: &Path, covariate_path: &Path) -> Result<LoadedPanel> {
    let mut rdr = open_csv(response_path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DimmError::Ingestion(format!("{}: {e}", response_path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_ids = header.first().is_some_and(|h| h == "subject_id");
    let value_cols = &header[usize::from(has_ids)..];
    let m = value_cols.len();
    if m < 2 {
        return ingest(format!("{}: need at least 2 response columns, found {m}", response_path.display()));
    }
    let mut subject_ids = Vec::new();
    let mut y = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| DimmError::Ingestion(format!("{}: row {}: {e}", response_path.display(), row + 1)))?;
        if rec.len() != header.len() {
            return ingest(format!(
                "{}: row {} has {} fields, expected {}",
                response_path.display(),
                row + 1,
                rec.len(),
                header.len()
            ));
        }
        let id = if has_ids { rec[0].to_string() } else { (row + 1).to_string() };
        if subject_ids.contains(&id) {
            return ingest(format!("{}: duplicate subject `{id}`", response_path.display()));
        }
        for (c, name) in value_cols.iter().enumerate() {
            let raw = &rec[c + usize::from(has_ids)];
            y.push(parse_cell(raw, response_path, || format!("subject `{id}`, column `{name}`"))?);
        }
        subject_ids.push(id);
    }
    let n = subject_ids.len();
    let index: HashMap<&str, usize> = subject_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let mut rdr = open_csv(covariate_path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DimmError::Ingestion(format!("{}: {e}", covariate_path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "subject_id" || header[1] != "position" {
        return ingest(format!("{}: header must be `subject_id, position, <covariates…>`", covariate_path.display()));
    }
    let names: Vec<String> = header[2..].to_vec();
    let p = names.len();
    let mut x = vec![0.0; n * m * p];
    let mut seen = vec![false; n * m];
    for (row, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| DimmError::Ingestion(format!("{}: row {}: {e}", covariate_path.display(), row + 1)))?;
        if rec.len() != header.len() {
            return ingest(format!(
                "{}: row {} has {} fields, expected {}",
                covariate_path.display(),
                row + 1,
                rec.len(),
                header.len()
            ));
        }
        let id = &rec[0];
        let Some(&i) = index.get(id) else {
            return ingest(format!("{}: row {}: unknown subject `{id}`", covariate_path.display(), row + 1));
        };
        let pos: usize = match rec[1].parse() {
            Ok(v) if (1..=m).contains(&v) => v,
            _ => {
                return ingest(format!(
                    "{}: subject `{id}`: position `{}` not in 1..{m}",
                    covariate_path.display(),
                    &rec[1]
                ))
            }
        };
        let r = pos - 1;
        if seen[i * m + r] {
            return ingest(format!("{}: subject `{id}`, position {pos} appears twice", covariate_path.display()));
        }
        seen[i * m + r] = true;
        for (k, name) in names.iter().enumerate() {
            x[(i * m + r) * p + k] =
                parse_cell(&rec[k + 2], covariate_path, || format!("subject `{id}`, position {pos}, column `{name}`"))?;
        }
    }
    if let Some(miss) = seen.iter().position(|s| !s) {
        return ingest(format!(
            "{}: no covariate row for subject `{}`, position {}",
            covariate_path.display(),
            subject_ids[miss / m],
            miss % m + 1
        ));
    }
    let data = PanelDataset::from_raw(n, m, p, y, x).map_err(|e| DimmError::Ingestion(e.to_string()))?;
    Ok(LoadedPanel { data, subject_ids, covariate_names: names })
}

/// Writes a panel in the format read by [`load_panel`], with full-precision
/// numbers.
pub fn save_panel(panel: &LoadedPanel, response_path: &Path, covariate_path: &Path) -> Result<()> {
    let d = &panel.data;
    let (n, m, p) = (d.n_subjects(), d.response_dim(), d.n_covariates());
    let csv_err = |e: csv::Error| DimmError::Io(e.into());
    let mut w = csv::Writer::from_path(response_path).map_err(csv_err)?;
    let mut head = vec!["subject_id".to_string()];
    head.extend((1..=m).map(|r| format!("y{r}")));
    w.write_record(&head).map_err(csv_err)?;
    for i in 0..n {
        let mut rec = vec![panel.subject_ids[i].clone()];
        rec.extend(d.response(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(covariate_path).map_err(csv_err)?;
    let mut head = vec!["subject_id".to_string(), "position".to_string()];
    head.extend(panel.covariate_names.iter().cloned());
    if head.len() != p + 2 {
        return Err(DimmError::Dataset(format!("{} covariate names for {p} columns", panel.covariate_names.len())));
    }
    w.write_record(&head).map_err(csv_err)?;
    for i in 0..n {
        for r in 0..m {
            let mut rec = vec![panel.subject_ids[i].clone(), (r + 1).to_string()];
            rec.extend(d.covariate_row(i, r).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a JSON document, reporting the field path of any schema error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| DimmError::Config { path: e.path().to_string(), message: e.inner().to_string() })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DimmError::Config { path: path.display().to_string(), message: e.to_string() })?;
    parse_json(&text)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub schema_version: u32,
    /// Relative paths are resolved against the config file's directory.
    pub response_path: PathBuf,
    pub covariate_path: PathBuf,
    pub partition: Vec<BlockSpec>,
    /// Prepend a column of ones to the covariates.
    #[serde(default)]
    pub intercept: bool,
    /// Sub-group analysis: integrate only these blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_to_integrate: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_count: Option<usize>,
    #[serde(default)]
    pub fit_options: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
}

impl FitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: FitConfig = read_json(path)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(DimmError::Config {
                path: "schema_version".into(),
                message: format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            });
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.response_path, &mut cfg.covariate_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = cfg.output_path.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn block_partition(&self) -> Result<BlockPartition> {
        BlockPartition::new(self.partition.clone())
            .map_err(|e| DimmError::Config { path: "partition".into(), message: e.to_string() })
    }

    /// Loads the panel, adding the intercept column if requested.
    pub fn load_data(&self) -> Result<LoadedPanel> {
        let panel = load_panel(&self.response_path, &self.covariate_path)?;
        if !self.intercept {
            return Ok(panel);
        }
        let d = &panel.data;
        let (n, m, p) = (d.n_subjects(), d.response_dim(), d.n_covariates());
        let mut x = Vec::with_capacity(n * m * (p + 1));
        for i in 0..n {
            for r in 0..m {
                x.push(1.0);
                x.extend_from_slice(d.covariate_row(i, r));
            }
        }
        let mut names = vec!["(intercept)".to_string()];
        names.extend(panel.covariate_names);
        Ok(LoadedPanel {
            data: PanelDataset::from_raw(n, m, p + 1, d.responses_raw().to_vec(), x)?,
            subject_ids: panel.subject_ids,
            covariate_names: names,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub beta_hat: Vec<f64>,
    pub gamma_hat: DependenceKind,
    pub logcl: f64,
    pub converged: bool,
    pub optimizer: OptimizerTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub q_stat: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub n_subjects: usize,
    pub response_dim: usize,
    pub blocks_used: Vec<String>,
    pub blocks: Vec<BlockReport>,
    pub coefficients: Vec<CoefficientReport>,
    pub covariance: Vec<Vec<f64>>,
    /// Q_N at the integrated estimate.
    pub q_stat: f64,
    /// Absent for a single block.
    pub gof: Option<GofReport>,
    pub ridge_used: f64,
    pub warnings: Vec<String>,
    /// Machine-dependent; excluded from determinism comparisons.
    pub timing: PhaseTiming,
}

impl FitReport {
    pub fn from_fit(fit: &DimmFit, covariate_names: &[String], response_dim: usize) -> Self {
        let it = &fit.integrated;
        let mut warnings = Vec::new();
        if it.small_sample {
            warnings.push(format!(
                "N = {} does not exceed Jp = {}; the weight matrix is poorly estimated",
                it.n_subjects,
                it.blocks_used.len() * it.beta_dimm.len()
            ));
        }
        if it.ridge_used > 0.0 {
            warnings.push(format!("weight matrix inverted with ridge {:e}", it.ridge_used));
        }
        FitReport {
            schema_version: SCHEMA_VERSION,
            n_subjects: it.n_subjects,
            response_dim,
            blocks_used: it.blocks_used.clone(),
            blocks: fit
                .block_fits
                .iter()
                .map(|b| BlockReport {
                    name: b.name.clone(),
                    beta_hat: b.beta_hat.iter().copied().collect(),
                    gamma_hat: b.gamma_hat,
                    logcl: b.logcl_at_optimum,
                    converged: b.trace.quasi_newton_converged,
                    optimizer: b.trace.clone(),
                })
                .collect(),
            coefficients: it
                .wald
                .iter()
                .zip(covariate_names)
                .map(|(w, name)| CoefficientReport {
                    name: name.clone(),
                    estimate: w.estimate,
                    std_error: w.std_error,
                    z: w.z,
                    p_value: w.p_value,
                    ci_lower: w.ci_lower,
                    ci_upper: w.ci_upper,
                })
                .collect(),
            covariance: it.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
            q_stat: it.q_stat,
            gof: it.gof.map(|(df, p_value)| GofReport { q_stat: it.q_stat, df, p_value }),
            ridge_used: it.ridge_used,
            warnings,
            timing: fit.timing.clone(),
        }
    }

    /// The report with timing zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> FitReport {
        FitReport { timing: PhaseTiming::default(), ..self.clone() }
    }
}

/// Worker count from an explicit value, the environment, or the machine.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DimmError::Config { path: "worker_count".into(), message: e.to_string() })?
        .install(f)
}

/// Runs the three-step fit described by `cfg`. `workers` overrides the
/// config's worker count.
pub fn cmd_fit(cfg: &FitConfig, workers: Option<usize>) -> Result<FitReport> {
    let partition = cfg.block_partition()?;
    let panel = cfg.load_data()?;
    let workers = resolve_workers(workers.or(cfg.worker_count));
    let fit =
        with_pool(workers, || run_dimm(&panel.data, &partition, &cfg.fit_options, cfg.blocks_to_integrate.as_deref()))?;
    let report = FitReport::from_fit(&fit, &panel.covariate_names, panel.data.response_dim());
    if let Some(out) = &cfg.output_path {
        write_json(&report, out)?;
    }
    Ok(report)
}

/// Q_N and the CEF log-density at a user-supplied β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaEvaluation {
    pub schema_version: u32,
    pub beta: Vec<f64>,
    pub blocks_used: Vec<String>,
    pub q_stat: f64,
    pub cef_log_density: f64,
    /// Jp: Q_N at the true β is asymptotically χ² with this many df.
    pub df: usize,
    /// P(χ²_df > q_stat), a test of H₀: β equals the supplied value.
    pub p_value: f64,
}

pub fn cmd_gof(cfg: &FitConfig, beta: &[f64], workers: Option<usize>) -> Result<BetaEvaluation> {
    let partition = cfg.block_partition()?;
    let panel = cfg.load_data()?;
    let p = panel.data.n_covariates();
    if beta.len() != p {
        return Err(DimmError::Config {
            path: "--beta".into(),
            message: format!("{} values given for {p} coefficients", beta.len()),
        });
    }
    let chosen = match &cfg.blocks_to_integrate {
        Some(names) => select_blocks(&partition, names)?,
        None => (0..partition.len()).collect(),
    };
    let parts = partition_dataset(&panel.data, &partition)?;
    let work: Vec<_> = chosen
        .iter()
        .map(|&j| {
            let spec = &partition.blocks()[j];
            (spec.name.clone(), parts[j].clone(), spec.structure)
        })
        .collect();
    let workers = resolve_workers(workers.or(cfg.worker_count));
    let (fits, q, cef) = with_pool(workers, || {
        let (fits, _) = fit_blocks(&work, &cfg.fit_options)?;
        let blocks: Vec<PanelDataset> = work.iter().map(|w| w.1.clone()).collect();
        let w = weight_matrix(&stack_scores(&fits)?)?;
        let psi = stacked_mean_score(beta, &blocks, &fits)?;
        let q = quadratic_form(&psi, &w, panel.data.n_subjects());
        let cef = cef_log_density(beta, &blocks, &fits, &w)?;
        Ok((fits, q, cef))
    })?;
    let df = fits.len() * p;
    Ok(BetaEvaluation {
        schema_version: SCHEMA_VERSION,
        beta: beta.to_vec(),
        blocks_used: fits.iter().map(|f| f.name.clone()).collect(),
        q_stat: q,
        cef_log_density: cef,
        df,
        p_value: chi2_sf(q, df as f64)?,
    })
}

pub fn load_scenario(path: &Path) -> Result<SimScenario> {
    let scn: SimScenario = read_json(path)?;
    scn.validate()?;
    Ok(scn)
}

/// Writes one CSV row per (replicate, method, coefficient) for successful
/// fits.
pub fn write_replicate_table(records: &[ReplicateRecord], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| DimmError::Io(e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["rep", "method", "coef", "estimate", "std_error", "q_stat"]).map_err(csv_err)?;
    for r in records.iter().filter(|r| r.error.is_none()) {
        for (q, (e, s)) in r.estimates.iter().zip(&r.std_errors).enumerate() {
            w.write_record([
                r.rep.to_string(),
                r.method.label().to_string(),
                q.to_string(),
                e.to_string(),
                s.to_string(),
                r.q_stat.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Paths written by [`cmd_simulate`].
#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub outcome: SimOutcome,
    pub report_path: PathBuf,
    pub table_path: PathBuf,
}

/// Runs a scenario file, writing `<name>_report.json` and
/// `<name>_replicates.csv` into `out_dir`.
pub fn cmd_simulate(scenario_path: &Path, out_dir: &Path, workers: Option<usize>) -> Result<SimulateOutput> {
    let scn = load_scenario(scenario_path)?;
    let outcome = run_scenario(&scn, resolve_workers(workers))?;
    std::fs::create_dir_all(out_dir)?;
    let report_path = out_dir.join(format!("{}_report.json", scn.name));
    let table_path = out_dir.join(format!("{}_replicates.csv", scn.name));
    write_json(&outcome.report, &report_path)?;
    write_replicate_table(&outcome.records, &table_path)?;
    Ok(SimulateOutput { outcome, report_path, table_path })
}
