//! Confidence filtering, per-frame sampling and the region grid, then a
//! bilinear lookup at a tracked pixel.

use ffinit::cloud::{assign_regions, filter_and_sample, RegionDims};
use ffinit::sim::{simulate, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = simulate(&Scenario::noisy(), 2)?;
    let cam = &ds.scenario.camera;
    let mut sampled = filter_and_sample(&ds.cloud, cam, 100, 1.5)?;
    let grid = assign_regions(&mut sampled, cam, RegionDims::new(3, 3))?;
    println!("{} frames x {} samples, region counts {:?}", sampled.num_frames(), sampled.k, grid.counts());
    let s = &sampled.frames[2][0];
    println!("frame 2 sample 0: pixel {:.1?}, region {}, confidence {:.2}, point in C0 {:.3?}", s.pixel.as_slice(), s.region, s.confidence, s.point.as_slice());

    let px = ds.tracks[0].pixels[3];
    let (point, conf) = ds.cloud.interpolate_at(3, &px)?;
    let in_i0 = ds.truth.keyframes[0].rotation.inverse() * (ds.tracks[0].point - ds.truth.keyframes[0].position);
    let truth = ds.scenario.extrinsics.cam_from_imu() * nalgebra::Point3::from(in_i0);
    println!("feature 0 in frame 3: interpolated {:.3?} (conf {conf:.2}), true / scale {:.3?}", point.as_slice(), (truth.coords / ds.truth.scale).as_slice());
    Ok(())
}
