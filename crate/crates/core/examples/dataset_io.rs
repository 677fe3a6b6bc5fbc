//! Write a simulated dataset in the on-disk layout, check the cloud against
//! its schema, load it back and initialize from disk.

use ffinit::cloud::format::{check_cloud, FrameFormat};
use ffinit::io::{read_window_data, write_dataset, write_run_outputs};
use ffinit::pipeline::{run_pipeline, RunConfig};
use ffinit::sim::{simulate, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join(format!("ffinit-example-{}", std::process::id()));
    let data = root.join("data");
    write_dataset(&data, &simulate(&Scenario::noisy(), 8)?, FrameFormat::Bin)?;
    let manifest = check_cloud(&data.join("cloud"))?;
    println!("cloud v{}: {} frames of {}x{}", manifest.version, manifest.num_frames, manifest.width, manifest.height);

    let cfg = RunConfig::default();
    let out = run_pipeline(&cfg, &read_window_data(&data)?)?;
    write_run_outputs(&root.join("run"), &cfg, &out, true)?;
    println!("success {}, outputs in {}", out.report.success, root.join("run").display());
    for entry in std::fs::read_dir(root.join("run"))? {
        println!("  {}", entry?.file_name().to_string_lossy());
    }
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
