//! Finite-difference check of every residual block at random states.

use ffinit::diagnostics::{jacobian_study, TruthWindow};
use ffinit::refine::RefineConfig;
use ffinit::sim::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let window = TruthWindow::simulate(&Scenario::noisy(), 0)?;
    for study in jacobian_study(&window, &RefineConfig::default(), 20, 0, 1e-6, 1e-5)? {
        println!("{:?}: worst {:.2e} over {} states", study.variant, study.max_error, study.states_checked);
        for (factor, err) in &study.worst_by_factor {
            println!("  {factor:<13}{err:.2e}");
        }
    }
    Ok(())
}
