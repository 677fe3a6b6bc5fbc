//! End-to-end runs on simulated windows.

use rayon::prelude::*;

use ffinit::cloud::RegionDims;
use ffinit::eval::{FailureCategory, InitReport};
use ffinit::io::{write_ablation_csv, write_metrics_csv, WindowData};
use ffinit::linear_init::LinearInitError;
use ffinit::pipeline::{run_ablation, run_pipeline, AblationSpec, InitVariant, RunConfig, Stage, StageError, SweepAxis};
use ffinit::sim::{simulate, Scenario};

fn run(scenario: &Scenario, cfg: &RunConfig, seed: u64) -> InitReport {
    let mut sc = *scenario;
    cfg.apply_to(&mut sc);
    run_pipeline(&RunConfig { seed, ..*cfg }, &WindowData::from_dataset(&simulate(&sc, seed).unwrap())).unwrap().report
}

#[test]
fn noiseless_windows_recover_scale() {
    for variant in [InitVariant::Ff, InitVariant::Sc] {
        for seed in 0..4 {
            let r = run(&Scenario::default(), &RunConfig { variant, ..RunConfig::default() }, seed);
            assert!(r.success, "{variant} seed {seed}: {:?}", r.failure_detail);
            assert!(r.scale_nl_pct.unwrap() < 0.5, "{variant} seed {seed}: {:?}", r.scale_nl_pct);
            assert!(r.gravity_deg.unwrap() < 0.05);
        }
    }
}

#[test]
fn two_keyframes_are_rejected_before_any_stage() {
    let ds = simulate(&Scenario::default(), 0).unwrap();
    let err = run_pipeline(&RunConfig { num_keyframes: 2, ..RunConfig::default() }, &WindowData::from_dataset(&ds)).unwrap_err();
    assert_eq!((err.stage, err.category), (Stage::Config, FailureCategory::Obs));
    assert_eq!(err.error, StageError::Linear(LinearInitError::FewerThanThreeFrames(2)));
    assert!(err.to_string().contains("FewerThanThreeFrames") || err.to_string().contains("at least 3 keyframes"));
}

#[test]
fn dongsi_cross_checks_feature_free() {
    for seed in 0..3 {
        let ff = run(&Scenario::default(), &RunConfig::default(), seed);
        let ds = run(&Scenario::default(), &RunConfig { variant: InitVariant::Dongsi, ..RunConfig::default() }, seed);
        assert!(ds.success, "seed {seed}: {:?}", ds.failure_detail);
        assert!(ds.scale_nl_pct.is_none());
        // both are near-exact on noiseless data, so they agree with each other
        assert!((ff.gravity_deg.unwrap() - ds.gravity_deg.unwrap()).abs() < 0.05);
        assert!((ff.velocity_mps.unwrap() - ds.velocity_mps.unwrap()).abs() < 0.005);
        assert!(ds.gravity_lin_deg.unwrap() < 0.05, "{:?}", ds.gravity_lin_deg);
    }
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let reports: Vec<InitReport> = (0..6u64).into_par_iter().map(|s| InitReport { window_id: s as usize, ..run(&Scenario::noisy(), &RunConfig::default(), s) }).collect();
        let path = dir.path().join(name);
        write_metrics_csv(&path, &reports).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(write("a.csv"), write("b.csv"));
}

#[test]
fn chi_square_pass_rate_on_noisy_windows() {
    let reports: Vec<InitReport> = (0..50u64).into_par_iter().map(|s| run(&Scenario::noisy(), &RunConfig::default(), s)).collect();
    let passed = reports.iter().filter(|r| r.chi_square.is_some_and(|c| c.passed)).count();
    assert!(passed >= 45, "{passed}/50 windows pass the chi-square test");
}

#[test]
fn ablation_tables_have_one_row_per_cell() {
    let seeds = vec![0, 1];
    let k = run_ablation(&AblationSpec::new(SweepAxis::Samples(vec![10, 20, 50, 100, 200, 500, 1000]), seeds.clone())).unwrap();
    assert_eq!(k.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["10", "20", "50", "100", "200", "500", "1000"]);
    assert!(k.iter().all(|r| r.runs == 2));
    let w = run_ablation(&AblationSpec::new(SweepAxis::Window(vec![0.5, 1.0, 1.5, 2.0]), seeds.clone())).unwrap();
    assert_eq!(w.len(), 4);
    let spec = AblationSpec::new(SweepAxis::Regions(vec![RegionDims::new(1, 1), RegionDims::new(3, 3)]), seeds);
    let g = run_ablation(&spec).unwrap();
    assert_eq!(g.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["1x1", "3x3"]);
    let dir = tempfile::tempdir().unwrap();
    write_ablation_csv(&dir.path().join("a.csv"), &g).unwrap();
    write_ablation_csv(&dir.path().join("b.csv"), &run_ablation(&spec).unwrap()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
}
