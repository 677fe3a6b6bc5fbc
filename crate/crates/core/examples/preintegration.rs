//! Preintegrate IMU between keyframes and compare the propagated states
//! with ground truth; then show the first-order bias correction.

use ffinit::geometry::gravity_world;
use ffinit::imu::{preintegrate, propagate, slice_samples, Biases, ImuNoise};
use ffinit::sim::{simulate, Scenario};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = simulate(&Scenario::default(), 1)?;
    let kf = &ds.truth.keyframes;
    let noise = ImuNoise::consumer_grade();
    let mut state = kf[0].nav();
    for w in kf.windows(2) {
        let samples = slice_samples(&ds.imu, w[0].timestamp, w[1].timestamp)?;
        let pre = preintegrate(&samples, &Biases::zero(), &noise)?;
        state = propagate(&state, &pre, &gravity_world());
        println!("to t {:.3}: position error {:.2e} m, velocity error {:.2e} m/s", w[1].timestamp, (state.position - w[1].position).norm(), (state.velocity - w[1].velocity).norm());
        state = w[1].nav();
    }

    let samples = slice_samples(&ds.imu, kf[0].timestamp, kf[kf.len() - 1].timestamp)?;
    let pre = preintegrate(&samples, &Biases::zero(), &noise)?;
    let shifted = Biases::new(Vector3::new(0.002, -0.001, 0.001), Vector3::new(0.02, 0.01, -0.03));
    let corrected = pre.correct_for_bias(&shifted);
    let exact = preintegrate(&samples, &shifted, &noise)?;
    println!("bias correction over {:.2} s: first-order vs re-integrated position {:.2e} m", pre.dt, (corrected.delta_p - exact.delta_p).norm());
    Ok(())
}
