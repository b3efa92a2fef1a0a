//! Integrates a chosen subset of blocks, as in a region-by-component study.
//!
//!     cargo run --example subgroup_analysis

use dimm::pairwise::FitOptions;
use dimm::pipeline::run_dimm;
use dimm::sim::{eeg_mimic_scenario, PreparedScenario, EEG_SUBGROUP};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut scenario = eeg_mimic_scenario();
    scenario.integrate_blocks = None;
    let prep = PreparedScenario::new(&scenario)?;
    let data = prep.generate(0)?;
    println!("{} subjects, {} responses in {} blocks", data.n_subjects(), data.response_dim(), prep.partition.len());

    let subgroup: Vec<String> = EEG_SUBGROUP.iter().map(|s| s.to_string()).collect();
    let pair = ["lfc_P2".to_string(), "rfc_P2".to_string(), "mpo_LSW".to_string()];
    for chosen in [&subgroup[..], &pair[..]] {
        let fit = run_dimm(&data, &prep.partition, &FitOptions::default(), Some(chosen))?;
        let ig = &fit.integrated;
        println!("\nblocks {:?}", ig.blocks_used);
        for (q, w) in ig.wald.iter().enumerate() {
            println!(
                "  beta{q}: {:>8.4} (se {:.4}, 95% CI [{:.4}, {:.4}])",
                w.estimate, w.std_error, w.ci_lower, w.ci_upper
            );
        }
        if let (Some(df), Some(p)) = (ig.gof_df(), ig.gof_pvalue()) {
            println!("  Q_N {:.3} on {df} df, p = {p:.3}", ig.q_stat);
        }
    }
    println!("\ntruth {:?}", scenario.beta0);
    Ok(())
}
