//! Synthetic scenes.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SceneSpec {
    /// Axis-aligned room seen from inside; every pixel hits a wall, so the
    /// synthesized cloud is a dense raster.
    Room { min: Vector3<f64>, max: Vector3<f64> },
    /// `count` points uniform in a box in front of the trajectory; the cloud
    /// is a sparse list of their projections.
    RandomPoints {
        count: usize,
        /// Box extent across the view, meters.
        lateral: f64,
        vertical: f64,
        /// Near and far face of the box ahead of the trajectory center.
        depth_range: (f64, f64),
    },
}

impl SceneSpec {
    pub fn default_room() -> Self {
        SceneSpec::Room { min: Vector3::new(-3.0, -4.0, -1.5), max: Vector3::new(4.5, 4.0, 2.5) }
    }

    pub fn default_points() -> Self {
        SceneSpec::RandomPoints { count: 200, lateral: 6.0, vertical: 6.0, depth_range: (1.0, 5.0) }
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::default_room()
    }
}

/// Distance along `dir` from `origin` (inside the box) to the first wall.
pub fn ray_box_exit(origin: &Vector3<f64>, dir: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<f64> {
    let mut t_exit = f64::INFINITY;
    for k in 0..3 {
        if dir[k] > 0.0 {
            t_exit = t_exit.min((max[k] - origin[k]) / dir[k]);
        } else if dir[k] < 0.0 {
            t_exit = t_exit.min((min[k] - origin[k]) / dir[k]);
        }
    }
    (t_exit.is_finite() && t_exit > 0.0).then_some(t_exit)
}

pub fn point_inside(p: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> bool {
    (0..3).all(|k| p[k] > min[k] && p[k] < max[k])
}

/// One uniformly random point in the box in front of `center`, facing +x.
pub fn random_box_point<R: Rng>(rng: &mut R, center: &Vector3<f64>, lateral: f64, vertical: f64, depth_range: (f64, f64)) -> Vector3<f64> {
    let depth = rng.random_range(depth_range.0..depth_range.1);
    center + Vector3::new(depth, rng.random_range(-0.5..0.5) * lateral, rng.random_range(-0.5..0.5) * vertical)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ray_hits_nearest_wall() {
        let (min, max) = (Vector3::new(-1.0, -2.0, -3.0), Vector3::new(4.0, 2.0, 3.0));
        let o = Vector3::zeros();
        assert_relative_eq!(ray_box_exit(&o, &Vector3::x(), &min, &max).unwrap(), 4.0);
        assert_relative_eq!(ray_box_exit(&o, &-Vector3::x(), &min, &max).unwrap(), 1.0);
        let d = Vector3::new(1.0, 1.0, 0.0).normalize();
        let t = ray_box_exit(&o, &d, &min, &max).unwrap();
        assert_relative_eq!((o + d * t).y, 2.0, epsilon = 1e-12);
        assert!(ray_box_exit(&Vector3::new(9.0, 0.0, 0.0), &Vector3::x(), &min, &max).is_none());
    }

    #[test]
    fn box_points_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_box_point(&mut rng, &Vector3::zeros(), 6.0, 6.0, (1.0, 5.0));
            assert!(p.x >= 1.0 && p.x < 5.0 && p.y.abs() <= 3.0 && p.z.abs() <= 3.0);
        }
    }
}
