//! Generate one simulated window and print what the initializer gets to see.
//!
//! `cargo run --example simulate_window -- 7`

use ffinit::sim::{simulate, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let ds = simulate(&Scenario::noisy(), seed)?;
    let kf = &ds.truth.keyframes;
    println!("seed {seed}: {} IMU samples, {} keyframes over {:.3} s", ds.imu.len(), kf.len(), kf[kf.len() - 1].timestamp - kf[0].timestamp);
    for k in kf {
        println!("  t {:.3}  p {:>7.3} {:>7.3} {:>7.3}  |v| {:.3} m/s", k.timestamp, k.position.x, k.position.y, k.position.z, k.velocity.norm());
    }
    let valid: usize = ds.cloud.frames.iter().map(|f| f.entries.iter().filter(|e| e.is_valid()).count()).sum();
    println!("cloud: {}x{} raster, {valid} valid entries, true scale {:.3} m per cloud unit", ds.cloud.width, ds.cloud.height, ds.truth.scale);
    println!("tracks: {} features; gravity in I0 {:.3?}", ds.tracks.len(), ds.truth.gravity_i0.as_slice());
    Ok(())
}
