//! Metrics on hand-made estimates: yaw-invariant gravity error, scale error,
//! window ATE and the chi-square test.

use ffinit::eval::{chi_square_gate, gravity_error, scale_error, window_ate, Pose};
use nalgebra::{UnitQuaternion, Vector3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gt = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.7);
    let tilted = UnitQuaternion::from_euler_angles(0.0, 1f64.to_radians(), 0.0) * gt;
    let yawed = UnitQuaternion::from_euler_angles(0.0, 0.0, 2.0) * gt;
    println!("gravity error: 1 deg tilt {:.3} deg, pure yaw {:.1e} deg", gravity_error(&tilted, &gt), gravity_error(&yawed, &gt));

    let predicted = Vector3::new(0.02, 0.0, 0.0);
    println!("scale error of s = 5.1 when the camera moved 0.1 m: {:.1} %", scale_error(5.1, &predicted, &Vector3::new(0.1, 0.0, 0.0))?);

    let truth: Vec<Pose> = (0..5).map(|i| Pose { rotation: UnitQuaternion::identity(), position: Vector3::new(0.1 * i as f64, 0.0, 0.0) }).collect();
    // a yawed, shifted copy with 1 cm of drift on the last pose
    let yaw = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.5);
    let mut est: Vec<Pose> = truth.iter().map(|p| Pose { rotation: yaw * p.rotation, position: yaw * p.position + Vector3::new(1.0, 2.0, 0.0) }).collect();
    est[4].position += yaw * Vector3::new(0.0, 0.01, 0.0);
    let (deg, m) = window_ate(&est, &truth)?;
    println!("window ATE: {deg:.2e} deg, {m:.4} m (1 cm on one of five poses)");

    let chi = chi_square_gate(540.0, 800, 80, 0.95)?;
    println!("chi-square: statistic {} vs {:.1} on {} dof, passed {}", chi.statistic, chi.threshold, chi.dof, chi.passed);
    Ok(())
}
