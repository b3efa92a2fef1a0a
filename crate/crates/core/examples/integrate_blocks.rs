//! Fits blocks separately, then combines them with the one-step estimator.
//! Also reports the goodness-of-fit test and compares with a direct
//! minimization of the GMM objective.
//!
//!     cargo run --example integrate_blocks

use dimm::gmm::{full_gmm_estimate, integrate, stack_scores, weight_matrix};
use dimm::model::partition_dataset;
use dimm::optim::BfgsOptions;
use dimm::pairwise::{fit_block, FitOptions};
use dimm::sim::SimScenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/table1_scaled.json");
    let scenario: SimScenario = dimm::io::parse_json(&std::fs::read_to_string(path)?)?;
    let prep = dimm::sim::PreparedScenario::new(&scenario)?;
    let data = prep.generate(0)?;
    let blocks = partition_dataset(&data, &prep.partition)?;

    let opts = FitOptions::default();
    let fits = blocks
        .iter()
        .zip(prep.partition.blocks())
        .map(|(d, b)| fit_block(&b.name, d, b.structure, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    for f in &fits {
        println!("{:>8}: {:?}", f.name, f.beta_hat.iter().map(|b| (b * 1e3).round() / 1e3).collect::<Vec<_>>());
    }

    let fit = integrate(&fits, &blocks)?;
    println!("\n  coef     truth  estimate        se         z   p-value");
    for (q, (w, truth)) in fit.wald.iter().zip(&scenario.beta0).enumerate() {
        println!("  {q:>4} {truth:>9.4} {:>9.4} {:>9.4} {:>9.2} {:>9.2e}", w.estimate, w.std_error, w.z, w.p_value);
    }
    if let Some((df, p)) = fit.gof {
        println!("\nQ_N = {:.3} on {df} df, p = {p:.3}, ridge {:.1e}", fit.q_stat, fit.ridge_used);
    }

    let w = weight_matrix(&stack_scores(&fits)?)?;
    let start = vec![0.0; scenario.n_covariates()];
    let argmin = full_gmm_estimate(&start, &blocks, &fits, &w, &BfgsOptions::default())?;
    println!("distance to direct minimizer of Q_N: {:.2e}", (&fit.beta_dimm - argmin).norm());
    Ok(())
}
