//! Rank of the feature-free system for two and three frames, on exact clouds
//! and on clouds with prediction error.
//!
//! Exact clouds lose one direction to a similarity about the first camera
//! center; any prediction error puts the rows back in general position.

use ffinit::diagnostics::rank_study;
use ffinit::linear_init::DEFAULT_RANK_TOL;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (frames, points) in [(2, 10), (3, 2), (4, 2)] {
        for noise in [0.0, 1e-2] {
            let study = rank_study(frames, points, 100, noise, 1, DEFAULT_RANK_TOL)?;
            println!("{frames} frames x {points} points, point noise {noise:<5}: (rank, count) {:?}", study.histogram());
        }
    }
    Ok(())
}
