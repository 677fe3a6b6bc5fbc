//! The feature-free linear system on one window and its gravity-constrained
//! solution, with and without cloud noise.

use ffinit::cloud::filter_and_sample;
use ffinit::diagnostics::TruthWindow;
use ffinit::geometry::GRAVITY_MAGNITUDE;
use ffinit::imu::{Biases, ImuPreintegration};
use ffinit::linear_init::{build_feature_free_system, rank_diagnostics, solve_constrained, WeightConfig, DEFAULT_RANK_TOL};
use ffinit::sim::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, scenario) in [("noiseless", Scenario::default()), ("noisy", Scenario::noisy())] {
        let w = TruthWindow::simulate(&scenario, 3)?;
        // the system wants preintegrations from keyframe 0
        let mut from_first = vec![ImuPreintegration::identity(Biases::zero())];
        for p in &w.preints {
            from_first.push(from_first[from_first.len() - 1].compose(p));
        }
        let sampled = filter_and_sample(&w.ds.cloud, &w.ds.scenario.camera, 100, 1.5)?;
        let sys = build_feature_free_system(&sampled, &from_first, &w.ds.scenario.extrinsics, &WeightConfig::default())?;
        let rank = rank_diagnostics(&sys, DEFAULT_RANK_TOL);
        let sol = solve_constrained(&sys, GRAVITY_MAGNITUDE)?;
        let t = &w.ds.truth;
        println!("{name}: {}x7 system, rank {}, cond {:.2e}, multiplier {:.3e}", sys.a.nrows(), rank.rank, rank.condition_number, sol.lambda);
        let est = sol.feature_free_state();
        println!(
            "  scale {:.4} (true {:.4}), velocity error {:.4} m/s, gravity error {:.4} deg",
            est.s,
            t.scale,
            (est.v0 - t.velocity_i0).norm(),
            ffinit::eval::gravity_angle(&est.g, &t.gravity_i0)
        );
    }
    Ok(())
}
