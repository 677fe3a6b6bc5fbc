//! Run the three initializers on the same noisy window and compare the
//! linear and refined estimates.

use ffinit::io::WindowData;
use ffinit::pipeline::{run_pipeline, InitVariant, RunConfig};
use ffinit::sim::{simulate, Scenario};

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.2}"))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = simulate(&Scenario::noisy(), 5)?;
    let data = WindowData::from_dataset(&ds);
    for variant in [InitVariant::Ff, InitVariant::Sc, InitVariant::Dongsi] {
        let out = run_pipeline(&RunConfig { variant, ..RunConfig::default() }, &data)?;
        let r = &out.report;
        let nl = out.refined.as_ref().expect("refinement enabled");
        println!(
            "{variant}: gravity {:.3} -> {:.3} deg, velocity {:.3} -> {:.3} m/s, scale error {} -> {} %, {} LM iterations, success {}",
            r.gravity_lin_deg.unwrap_or(f64::NAN),
            r.gravity_deg.unwrap_or(f64::NAN),
            r.velocity_lin_mps.unwrap_or(f64::NAN),
            r.velocity_mps.unwrap_or(f64::NAN),
            pct(r.scale_lin_pct),
            pct(r.scale_nl_pct),
            nl.iterations,
            r.success
        );
    }
    Ok(())
}
