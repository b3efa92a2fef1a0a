//! Runs a bundled Monte-Carlo scenario and prints per-method metrics.
//!
//!     cargo run --release --example monte_carlo -- scenarios/micro.json [replicates]

use dimm::sim::{run_scenario, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "crates/core/scenarios/micro.json".into());
    let mut scenario: SimScenario = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if let Some(r) = args.next() {
        scenario.n_replicates = r.parse()?;
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let out = run_scenario(&scenario, workers)?;
    let report = &out.report;
    println!(
        "{}: N = {}, M = {}, {} replicates",
        report.scenario, report.n_subjects, report.response_dim, report.n_replicates
    );
    for (m, t) in report.methods.iter().zip(&report.timing) {
        println!(
            "\n{} ({} ok, {} failed, {:.3} CPU s per replicate)",
            m.method.label(),
            m.n_success,
            m.n_failed,
            t.mean_cpu_seconds
        );
        println!("  coef     truth      bias       ese       ase      rmse  coverage");
        for c in &m.coefficients {
            println!(
                "  {:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.3}",
                c.index, c.truth, c.bias, c.ese, c.ase, c.rmse, c.coverage
            );
        }
        if let Some(g) = &m.gof {
            println!("  Q_N: mean {:.3} (df {}), rejection at 0.95: {:.3}", g.mean_q, g.df, g.rejection_rate);
            for q in &g.quantiles {
                println!("    p = {:.2}: empirical {:.3}, chi-squared {:.3}", q.prob, q.empirical, q.theoretical);
            }
        }
    }
    Ok(())
}
