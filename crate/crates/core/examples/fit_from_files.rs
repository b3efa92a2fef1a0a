//! Writes a panel to CSV, points a fit config at it and runs the same path
//! as `dimm fit --config`.
//!
//!     cargo run --example fit_from_files [output-dir]

use std::path::PathBuf;

use dimm::io::{cmd_fit, save_panel, write_json, FitConfig, LoadedPanel, SCHEMA_VERSION};
use dimm::sim::{PreparedScenario, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: PathBuf =
        std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("dimm_fit_example"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;

    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/wald_null.json");
    let mut scenario: SimScenario = dimm::io::parse_json(&std::fs::read_to_string(path)?)?;
    // the config adds its own intercept column, whose true value is 0
    scenario.intercept = false;
    scenario.beta0 = vec![0.7];
    let data = PreparedScenario::new(&scenario)?.generate(0)?;
    let panel = LoadedPanel {
        subject_ids: (1..=data.n_subjects()).map(|i| format!("subj{i}")).collect(),
        covariate_names: vec!["x1".into()],
        data,
    };
    save_panel(&panel, &dir.join("responses.csv"), &dir.join("covariates.csv"))?;

    let cfg = FitConfig {
        schema_version: SCHEMA_VERSION,
        response_path: dir.join("responses.csv"),
        covariate_path: dir.join("covariates.csv"),
        partition: scenario.partition.clone(),
        intercept: true,
        blocks_to_integrate: None,
        worker_count: None,
        fit_options: Default::default(),
        output_path: Some(dir.join("report.json")),
    };
    write_json(&cfg, &dir.join("fit.json"))?;
    let report = cmd_fit(&FitConfig::load(&dir.join("fit.json"))?, None)?;
    for c in &report.coefficients {
        println!("{:<12} {:>8.4}  se {:.4}  p {:.3}", c.name, c.estimate, c.std_error, c.p_value);
    }
    println!("wrote {}", dir.join("report.json").display());
    Ok(())
}
