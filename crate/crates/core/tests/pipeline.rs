use dimm::baselines::{gee_fit, WorkingCorrelation};
use dimm::gmm::{
    cef_log_density, dimm_covariance, full_gmm_estimate, godambe_bread, godambe_bread_stacked, integrate, q_statistic,
    stack_scores, weight_matrix,
};
use dimm::model::{departition, partition_dataset, BlockPartition, BlockSpec, DependenceKind, PanelDataset, Structure};
use dimm::optim::BfgsOptions;
use dimm::pairwise::{fit_block, FitOptions};
use dimm::pipeline::run_dimm;
use dimm::sim::{
    eeg_mimic_scenario, run_scenario, BetweenBlock, CovariateRecipe, PreparedScenario, SimMethod, SimScenario,
    SCHEMA_VERSION,
};

fn scenario(n: usize, sizes: &[usize]) -> SimScenario {
    SimScenario {
        schema_version: SCHEMA_VERSION,
        name: "pipeline".into(),
        n_subjects: n,
        intercept: true,
        beta0: vec![0.4, -0.7],
        covariates: vec![CovariateRecipe::StandardNormal],
        partition: sizes
            .iter()
            .enumerate()
            .map(|(j, &size)| BlockSpec { name: format!("b{}", j + 1), size, structure: Structure::Ar1 })
            .collect(),
        within: vec![DependenceKind::Ar1 { sigma: 1.0, rho: 0.5 }],
        between: BetweenBlock::Random { seed: 5, eigen_floor: 0.1, offdiag_scale: 0.8 },
        methods: vec![SimMethod::Dimm],
        n_replicates: 2,
        seed: 99,
        integrate_blocks: None,
        fit_options: FitOptions::default(),
    }
}

fn dataset(n: usize, sizes: &[usize], rep: usize) -> (PanelDataset, BlockPartition) {
    let prep = PreparedScenario::new(&scenario(n, sizes)).unwrap();
    (prep.generate(rep).unwrap(), prep.partition.clone())
}

#[test]
fn subgroup_matches_pipeline_on_reduced_dataset() {
    let (data, part) = dataset(300, &[3, 4, 3], 0);
    let opts = FitOptions::default();
    let sub = run_dimm(&data, &part, &opts, Some(&["b3".into(), "b1".into()])).unwrap();

    let parts = partition_dataset(&data, &part).unwrap();
    let reduced = departition(&[parts[0].clone(), parts[2].clone()]).unwrap();
    let reduced_part = BlockPartition::new(vec![part.blocks()[0].clone(), part.blocks()[2].clone()]).unwrap();
    let direct = run_dimm(&reduced, &reduced_part, &opts, None).unwrap();

    assert_eq!(sub.integrated.beta_dimm, direct.integrated.beta_dimm);
    assert_eq!(sub.integrated.covariance, direct.integrated.covariance);
    assert_eq!(sub.integrated.q_stat, direct.integrated.q_stat);
    assert_eq!(sub.integrated.blocks_used, vec!["b1", "b3"]);
    assert_eq!(sub.integrated.gof_df(), Some(2));
}

#[test]
fn single_block_collapses_to_block_estimate() {
    let (data, _) = dataset(200, &[5], 1);
    let part = BlockPartition::uniform(&[5], Structure::Ar1).unwrap();
    let fit = run_dimm(&data, &part, &FitOptions::default(), None).unwrap();
    let diff = (&fit.integrated.beta_dimm - &fit.block_fits[0].beta_hat).amax();
    assert!(diff <= 1e-10, "{diff}");
    assert!(fit.integrated.gof.is_none());

    let blocks = vec![data.clone()];
    let w = weight_matrix(&stack_scores(&fit.block_fits).unwrap()).unwrap();
    let q = q_statistic(fit.block_fits[0].beta_hat.as_slice(), &blocks, &fit.block_fits, &w).unwrap();
    assert!(q < 1e-10, "{q}");
}

#[test]
fn cef_density_is_negative_half_q_and_peaks_at_the_estimate() {
    let (data, part) = dataset(400, &[5, 5], 2);
    let blocks = partition_dataset(&data, &part).unwrap();
    let opts = FitOptions::default();
    let fits: Vec<_> =
        blocks.iter().zip(part.blocks()).map(|(d, b)| fit_block(&b.name, d, b.structure, &opts).unwrap()).collect();
    let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
    let integrated = integrate(&fits, &blocks).unwrap();
    let center = integrated.beta_dimm.clone();

    // grid over each coordinate with the other held at the estimate
    let step = 0.002;
    for k in 0..2 {
        let mut best_q = (f64::INFINITY, 0);
        let mut best_cef = (f64::NEG_INFINITY, 0);
        let mut prev_q = None;
        for g in -10i32..=10 {
            let mut beta = center.clone();
            beta[k] += g as f64 * step;
            let q = q_statistic(beta.as_slice(), &blocks, &fits, &w).unwrap();
            let cef = cef_log_density(beta.as_slice(), &blocks, &fits, &w).unwrap();
            assert!((cef + q / 2.0).abs() <= 1e-12 * q.max(1.0));
            if let Some((pq, pc)) = prev_q {
                assert_eq!(q < pq, cef > pc);
            }
            prev_q = Some((q, cef));
            if q < best_q.0 {
                best_q = (q, g);
            }
            if cef > best_cef.0 {
                best_cef = (cef, g);
            }
        }
        assert_eq!(best_q.1, best_cef.1);
        assert_eq!(best_q.1, 0, "grid minimum away from the one-step estimate");
    }
}

#[test]
fn one_step_close_to_full_gmm() {
    let (data, part) = dataset(400, &[5, 5], 3);
    let blocks = partition_dataset(&data, &part).unwrap();
    let opts = FitOptions::default();
    let fits: Vec<_> =
        blocks.iter().zip(part.blocks()).map(|(d, b)| fit_block(&b.name, d, b.structure, &opts).unwrap()).collect();
    let w = weight_matrix(&stack_scores(&fits).unwrap()).unwrap();
    let one_step = integrate(&fits, &blocks).unwrap().beta_dimm;
    let full = full_gmm_estimate(&[0.0, 0.0], &blocks, &fits, &w, &BfgsOptions::default()).unwrap();
    assert!((&one_step - &full).norm() <= 0.02);

    let a = godambe_bread(&fits, &w).unwrap();
    let b = godambe_bread_stacked(&fits, &w).unwrap();
    assert!((&a - &b).amax() <= 1e-12 * a.amax());
    let cov = dimm_covariance(&fits, &w).unwrap();
    assert_eq!(cov, cov.transpose());
    assert!(cov.clone().cholesky().is_some());
}

#[test]
fn gee_cs_recovers_true_exchangeable_correlation() {
    let mut s = scenario(2000, &[6]);
    s.within = vec![DependenceKind::Cs { sigma: 1.5, rho: 0.4 }];
    let prep = PreparedScenario::new(&s).unwrap();
    let mut rhos = Vec::new();
    for rep in 0..5 {
        let fit = gee_fit(&prep.generate(rep).unwrap(), WorkingCorrelation::Exchangeable).unwrap();
        assert!(fit.converged);
        rhos.push(fit.rho_hat.unwrap());
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!((mean - 0.4).abs() < 0.02, "{rhos:?}");
}

#[test]
fn eeg_subgroup_dimm_more_precise_than_gee_cs() {
    let scn = eeg_mimic_scenario();
    let out = run_scenario(&scn, 2).unwrap();
    let median = |method: SimMethod, q: usize| {
        let mut se: Vec<f64> =
            out.records.iter().filter(|r| r.method == method && r.error.is_none()).map(|r| r.std_errors[q]).collect();
        se.sort_by(f64::total_cmp);
        se[se.len() / 2]
    };
    for q in 0..scn.beta0.len() {
        let (d, g) = (median(SimMethod::Dimm, q), median(SimMethod::GeeCs, q));
        assert!(d <= g, "coefficient {q}: DIMM {d} vs GEE-CS {g}");
    }
    let dimm = out.report.method(SimMethod::Dimm).unwrap();
    assert_eq!(dimm.gof.as_ref().unwrap().df, 4);
}

#[test]
fn micro_scenario_all_methods_unbiased() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/micro.json")).unwrap();
    let scn: SimScenario = dimm::io::parse_json(&text).unwrap();
    let out = run_scenario(&scn, 1).unwrap();
    for m in &out.report.methods {
        for c in &m.coefficients {
            assert!(c.bias.abs() < 0.05, "{:?} coefficient {}: bias {}", m.method, c.index, c.bias);
        }
    }
}

#[test]
fn bundled_eeg_file_matches_builder() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/eeg_mimic.json")).unwrap();
    let scn: SimScenario = dimm::io::parse_json(&text).unwrap();
    assert_eq!(scn, eeg_mimic_scenario());
}
