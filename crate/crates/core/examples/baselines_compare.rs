//! DIMM against GEE (independence and exchangeable) and the GLS oracle on
//! one simulated dataset.
//!
//!     cargo run --example baselines_compare

use dimm::baselines::{gee_fit, GlsOracle, WorkingCorrelation};
use dimm::pipeline::run_dimm;
use dimm::sim::{PreparedScenario, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/table1_scaled.json");
    let scenario: SimScenario = dimm::io::parse_json(&std::fs::read_to_string(path)?)?;
    let prep = PreparedScenario::new(&scenario)?;
    let full = prep.generate(1)?;
    let (data, part) = prep.analysis_view(&full)?;

    let dimm = run_dimm(&data, &part, &scenario.fit_options, None)?;
    let ind = gee_fit(&data, WorkingCorrelation::Independence)?;
    let cs = gee_fit(&data, WorkingCorrelation::Exchangeable)?;
    let gls = GlsOracle::new(&prep.analysis_sigma())?.fit(&data)?;

    let rows = [
        ("DIMM", dimm.integrated.beta_dimm.as_slice().to_vec(), dimm.integrated.std_errors()),
        ("GEE-IND", ind.beta_hat.as_slice().to_vec(), ind.std_errors()),
        ("GEE-CS", cs.beta_hat.as_slice().to_vec(), cs.std_errors()),
        ("GLS", gls.beta_hat.as_slice().to_vec(), gls.std_errors()),
    ];
    println!("truth    {:?}", scenario.beta0);
    for (name, est, se) in rows {
        let cells: Vec<String> = est.iter().zip(&se).map(|(b, s)| format!("{b:.3} ({s:.3})")).collect();
        println!("{name:<8} {}", cells.join("  "));
    }
    if let Some(rho) = cs.rho_hat {
        println!("GEE-CS working correlation {rho:.3}");
    }
    Ok(())
}
