//! Sweep the number of cloud samples per frame and print the table.

use ffinit::io::write_ablation;
use ffinit::pipeline::{run_ablation, AblationSpec, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = AblationSpec::new(SweepAxis::Samples(vec![10, 20, 50, 100, 200]), (0..8).collect());
    let rows = run_ablation(&spec)?;
    write_ablation(std::io::stdout().lock(), &rows)?;
    Ok(())
}
