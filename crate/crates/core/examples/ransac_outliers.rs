//! Corrupt 30% of the cloud with outliers whose confidence looks like the
//! inliers', then compare the linear stage with and without RANSAC.

use ffinit::eval::median;
use ffinit::io::WindowData;
use ffinit::pipeline::{run_pipeline, RunConfig};
use ffinit::sim::{simulate, OutlierConfidence, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut scenario = Scenario::noisy();
    scenario.sensor.outlier_ratio = 0.3;
    scenario.sensor.outlier_confidence = OutlierConfidence::Matched;
    let mut cfg = RunConfig { refine_enabled: false, ..RunConfig::default() };
    cfg.ransac.subset_per_frame = 2;
    cfg.ransac.iterations = 200;
    for use_ransac in [false, true] {
        let mut errors = Vec::new();
        let mut kept = Vec::new();
        for seed in 0..10 {
            let ds = simulate(&scenario, seed)?;
            let out = run_pipeline(&RunConfig { use_ransac, seed, ..cfg }, &WindowData::from_dataset(&ds))?;
            errors.extend(out.report.gravity_lin_deg);
            if let Some(lin) = &out.linear {
                kept.extend(lin.inliers.map(|n| n as f64 / lin.blocks as f64));
            }
        }
        println!("RANSAC {}: median gravity error {:.2} deg, median inlier fraction {:?}", if use_ransac { "on " } else { "off" }, median(&errors).unwrap_or(f64::NAN), median(&kept));
    }
    Ok(())
}
