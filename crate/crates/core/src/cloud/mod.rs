//! Predicted up-to-scale point clouds and their preprocessing.
//!
//! Every point is expressed in the reference camera frame `C₀`. A cloud is
//! either a dense raster (one entry per pixel, row-major) or a sparse list
//! of entries with arbitrary pixel coordinates.

pub mod format;

use std::cmp::Ordering;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Extrinsics, PinholeCamera};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("frame {frame} has {available} valid entries, {required} required")]
    InsufficientPoints { frame: usize, available: usize, required: usize },
    #[error("pixel ({x}, {y}) outside the {width}x{height} raster")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("raster neighbor ({col}, {row}) of the query pixel is invalid")]
    NeighborInvalid { col: usize, row: usize },
    #[error("frame {0} is not a dense raster")]
    NotRaster(usize),
    #[error("frame index {0} out of range")]
    NoSuchFrame(usize),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("sample count K must be at least 1")]
    ZeroSamples,
    #[error("region grid must have at least one row and column")]
    EmptyGrid,
}

/// One predicted point with its pixel and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudEntry {
    pub pixel: Vector2<f64>,
    /// `ᶜ⁰p̄`, up to scale.
    pub point: Vector3<f64>,
    pub confidence: f64,
}

impl CloudEntry {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>, confidence: f64) -> Self {
        Self { pixel, point, confidence }
    }

    /// Placeholder for raster pixels without a prediction.
    pub fn invalid(pixel: Vector2<f64>) -> Self {
        Self { pixel, point: Vector3::repeat(f64::NAN), confidence: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        self.confidence >= 1.0 && self.point.iter().all(|v| v.is_finite()) && self.pixel.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudFrame {
    pub timestamp: f64,
    pub entries: Vec<CloudEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedCloud {
    pub width: usize,
    pub height: usize,
    /// When set, each frame holds `width·height` entries in row-major order.
    pub dense_raster: bool,
    pub frames: Vec<CloudFrame>,
    /// Predicted camera centers `C₀ → Cᵢ` in the same up-to-scale units, when
    /// the model provides them.
    pub camera_positions: Option<Vec<Vector3<f64>>>,
}

impl PredictedCloud {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<&CloudFrame, CloudError> {
        self.frames.get(index).ok_or(CloudError::NoSuchFrame(index))
    }

    /// Bilinear blend of the four raster nodes around `pixel`.
    ///
    /// Raster nodes sit at integer pixel coordinates `(col, row)`.
    pub fn interpolate_at(&self, frame: usize, pixel: &Vector2<f64>) -> Result<(Vector3<f64>, f64), CloudError> {
        let f = self.frame(frame)?;
        if !self.dense_raster {
            return Err(CloudError::NotRaster(frame));
        }
        let (w, h) = (self.width, self.height);
        let out = CloudError::OutOfBounds { x: pixel.x, y: pixel.y, width: w, height: h };
        if !(pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= (w - 1) as f64 && pixel.y <= (h - 1) as f64) {
            return Err(out);
        }
        let c0 = (pixel.x.floor() as usize).min(w.saturating_sub(2));
        let r0 = (pixel.y.floor() as usize).min(h.saturating_sub(2));
        let c1 = (c0 + 1).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let ax = pixel.x - c0 as f64;
        let ay = pixel.y - r0 as f64;
        let mut point = Vector3::zeros();
        let mut conf = 0.0;
        for (col, row, weight) in [(c0, r0, (1.0 - ax) * (1.0 - ay)), (c1, r0, ax * (1.0 - ay)), (c0, r1, (1.0 - ax) * ay), (c1, r1, ax * ay)] {
            let e = &f.entries[row * w + col];
            if !e.is_valid() {
                // a zero-weight neighbor may still be a hole
                if weight == 0.0 {
                    continue;
                }
                return Err(CloudError::NeighborInvalid { col, row });
            }
            point += e.point * weight;
            conf += e.confidence * weight;
        }
        Ok((point, conf))
    }
}

/// One sampled cloud entry ready for the linear system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub pixel: Vector2<f64>,
    /// Normalized image coordinates `(u, v)`.
    pub bearing: Vector2<f64>,
    pub point: Vector3<f64>,
    pub confidence: f64,
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSet {
    pub k: usize,
    pub frames: Vec<Vec<Sample>>,
}

impl SampledSet {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Sample)> {
        self.frames.iter().enumerate().flat_map(|(i, f)| f.iter().map(move |s| (i, s)))
    }

    /// Multiply every cloud point by `factor`.
    pub fn rescaled(&self, factor: f64) -> SampledSet {
        let mut out = self.clone();
        for s in out.frames.iter_mut().flatten() {
            s.point *= factor;
        }
        out
    }
}

/// Descending confidence, then ascending `(row, col)`.
fn priority(a: &CloudEntry, b: &CloudEntry) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.pixel.y.total_cmp(&b.pixel.y))
        .then(a.pixel.x.total_cmp(&b.pixel.x))
}

/// Pick `k` high-confidence entries per frame, spread over a uniform patch grid.
///
/// The image is cut into `⌈√k⌉²` patches and the best entry of every patch is
/// a candidate. If there are more candidates than `k`, the best `k` are kept;
/// if fewer, the remaining slots are filled in global confidence order.
pub fn filter_and_sample(cloud: &PredictedCloud, camera: &PinholeCamera, k: usize, conf_min: f64) -> Result<SampledSet, CloudError> {
    if k == 0 {
        return Err(CloudError::ZeroSamples);
    }
    let n = (k as f64).sqrt().ceil() as usize;
    let frames = cloud
        .frames
        .iter()
        .enumerate()
        .map(|(fi, frame)| {
            let mut valid: Vec<&CloudEntry> = frame.entries.iter().filter(|e| e.is_valid() && e.confidence >= conf_min).collect();
            if valid.len() < k {
                return Err(CloudError::InsufficientPoints { frame: fi, available: valid.len(), required: k });
            }
            valid.sort_by(|a, b| priority(a, b));
            let mut taken = vec![false; valid.len()];
            let mut patch_used = vec![false; n * n];
            let mut chosen = Vec::with_capacity(k);
            // In priority order the first entry seen in a patch is its best one.
            for (idx, e) in valid.iter().enumerate() {
                let col = patch_index(e.pixel.x, cloud.width, n);
                let row = patch_index(e.pixel.y, cloud.height, n);
                let p = row * n + col;
                if !patch_used[p] {
                    patch_used[p] = true;
                    taken[idx] = true;
                    chosen.push(idx);
                    if chosen.len() == k {
                        break;
                    }
                }
            }
            for (idx, t) in taken.iter_mut().enumerate() {
                if chosen.len() == k {
                    break;
                }
                if !*t {
                    *t = true;
                    chosen.push(idx);
                }
            }
            Ok(chosen
                .into_iter()
                .map(|idx| {
                    let e = valid[idx];
                    Sample { pixel: e.pixel, bearing: camera.normalize(&e.pixel), point: e.point, confidence: e.confidence, region: 0 }
                })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampledSet { k, frames })
}

fn patch_index(coord: f64, extent: usize, n: usize) -> usize {
    let cell = (coord / extent as f64 * n as f64).floor();
    if cell < 0.0 {
        0
    } else {
        (cell as usize).min(n - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionDims {
    pub rows: usize,
    pub cols: usize,
}

impl RegionDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

impl Default for RegionDims {
    fn default() -> Self {
        Self { rows: 3, cols: 3 }
    }
}

/// Uniform grid over the reference image with 4-connected adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub dims: RegionDims,
    /// Region of every sample, indexed `[frame][sample]`.
    pub assignment: Vec<Vec<usize>>,
    /// Unordered adjacent cell pairs `(j, l)` with `j < l`.
    pub adjacency: Vec<(usize, usize)>,
    /// Samples whose reference-image projection fell outside the image or
    /// behind the camera and were clamped to the nearest cell.
    pub clamped: usize,
}

impl RegionGrid {
    pub fn num_regions(&self) -> usize {
        self.dims.count()
    }

    pub fn are_adjacent(&self, j: usize, l: usize) -> bool {
        let (a, b) = if j < l { (j, l) } else { (l, j) };
        self.adjacency.contains(&(a, b))
    }

    /// Sample count per region over all frames.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_regions()];
        for r in self.assignment.iter().flatten() {
            c[*r] += 1;
        }
        c
    }
}

pub fn grid_adjacency(dims: RegionDims) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let id = r * dims.cols + c;
            if c + 1 < dims.cols {
                edges.push((id, id + 1));
            }
            if r + 1 < dims.rows {
                edges.push((id, id + dims.cols));
            }
        }
    }
    edges
}

/// Assign each sample to the grid cell its point projects to in the `C₀` image.
///
/// Region ids are written back into `sampled`.
pub fn assign_regions(sampled: &mut SampledSet, camera: &PinholeCamera, dims: RegionDims) -> Result<RegionGrid, CloudError> {
    if dims.rows == 0 || dims.cols == 0 {
        return Err(CloudError::EmptyGrid);
    }
    let mut clamped = 0;
    let mut assignment = Vec::with_capacity(sampled.frames.len());
    for frame in sampled.frames.iter_mut() {
        let mut ids = Vec::with_capacity(frame.len());
        for s in frame.iter_mut() {
            let (pixel, outside) = match camera.project_pixel(&s.point) {
                Ok(px) => (px, !(px.x >= 0.0 && px.y >= 0.0 && px.x < camera.width as f64 && px.y < camera.height as f64)),
                // behind the camera: the sample's own pixel is the best guess
                Err(_) => (s.pixel, true),
            };
            if outside {
                clamped += 1;
            }
            let col = patch_index(pixel.x, camera.width, dims.cols);
            let row = patch_index(pixel.y, camera.height, dims.rows);
            s.region = row * dims.cols + col;
            ids.push(s.region);
        }
        assignment.push(ids);
    }
    if clamped > 0 {
        log::debug!("{clamped} samples projected outside the reference image and were clamped");
    }
    Ok(RegionGrid { dims, assignment, adjacency: grid_adjacency(dims), clamped })
}

/// `ᴵ⁰p = s ᴵ_C R ᶜ⁰p̄ + ᴵp_C`
pub fn lift_to_i0(point_c0: &Vector3<f64>, s: f64, extrinsics: &Extrinsics) -> Result<Vector3<f64>, CloudError> {
    if !(s > 0.0) {
        return Err(CloudError::NonPositiveScale(s));
    }
    Ok(s * (extrinsics.rot_imu_cam * point_c0) + extrinsics.trans_imu_cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;

    fn camera(w: usize, h: usize) -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    /// Raster whose point and confidence are affine in the pixel coordinates.
    fn affine_raster(w: usize, h: usize, frames: usize) -> PredictedCloud {
        let frames = (0..frames)
            .map(|f| CloudFrame {
                timestamp: f as f64 * 0.1,
                entries: (0..h)
                    .flat_map(|r| (0..w).map(move |c| (c as f64, r as f64)))
                    .map(|(x, y)| CloudEntry::new(Vector2::new(x, y), Vector3::new(0.1 * x + 1.0, -0.2 * y + 0.5 * x, 3.0 + 0.01 * y), 2.0 + 0.05 * x + 0.1 * y))
                    .collect(),
            })
            .collect();
        PredictedCloud { width: w, height: h, dense_raster: true, frames, camera_positions: None }
    }

    #[test]
    fn samples_k_per_frame_on_dense_raster() {
        let cloud = affine_raster(64, 48, 5);
        let s = filter_and_sample(&cloud, &camera(64, 48), 100, 1.5).unwrap();
        assert_eq!(s.num_frames(), 5);
        assert!(s.frames.iter().all(|f| f.len() == 100));
        // 10x10 patches, one sample each
        let patches: std::collections::HashSet<_> =
            s.frames[0].iter().map(|x| (patch_index(x.pixel.x, 64, 10), patch_index(x.pixel.y, 48, 10))).collect();
        assert_eq!(patches.len(), 100);
        assert!(s.iter().all(|(_, x)| x.confidence >= 1.5));
    }

    #[test]
    fn patch_winner_is_highest_confidence() {
        let cloud = affine_raster(20, 20, 1);
        let s = filter_and_sample(&cloud, &camera(20, 20), 4, 1.0).unwrap();
        // confidence increases with x and y: best pixel of each 10x10 patch is its bottom-right corner
        let mut px: Vec<_> = s.frames[0].iter().map(|x| (x.pixel.x as usize, x.pixel.y as usize)).collect();
        px.sort();
        assert_eq!(px, vec![(9, 9), (9, 19), (19, 9), (19, 19)]);
    }

    #[test]
    fn equal_confidence_breaks_ties_by_row_then_col() {
        let mut cloud = affine_raster(8, 8, 1);
        for e in &mut cloud.frames[0].entries {
            e.confidence = 3.0;
        }
        let s = filter_and_sample(&cloud, &camera(8, 8), 4, 1.0).unwrap();
        let px: Vec<_> = s.frames[0].iter().map(|x| (x.pixel.y as usize, x.pixel.x as usize)).collect();
        assert_eq!(px, vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
        let again = filter_and_sample(&cloud, &camera(8, 8), 4, 1.0).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn shortfall_is_filled_globally() {
        // all valid entries crowd into one patch
        let entries = (0..12).map(|i| CloudEntry::new(Vector2::new(i as f64 * 0.1, 0.0), Vector3::new(0.0, 0.0, 1.0), 10.0 - i as f64 * 0.5)).collect();
        let cloud = PredictedCloud { width: 40, height: 40, dense_raster: false, frames: vec![CloudFrame { timestamp: 0.0, entries }], camera_positions: None };
        let s = filter_and_sample(&cloud, &camera(40, 40), 9, 1.5).unwrap();
        let conf: Vec<_> = s.frames[0].iter().map(|x| x.confidence).collect();
        assert_eq!(conf, vec![10.0, 9.5, 9.0, 8.5, 8.0, 7.5, 7.0, 6.5, 6.0]);
    }

    #[test]
    fn insufficient_points() {
        let entries = (0..5).map(|i| CloudEntry::new(Vector2::new(i as f64, 0.0), Vector3::new(0.0, 0.0, 1.0), 5.0)).collect();
        let cloud = PredictedCloud { width: 10, height: 10, dense_raster: false, frames: vec![CloudFrame { timestamp: 0.0, entries }], camera_positions: None };
        assert_eq!(
            filter_and_sample(&cloud, &camera(10, 10), 10, 1.5),
            Err(CloudError::InsufficientPoints { frame: 0, available: 5, required: 10 })
        );
    }

    #[test]
    fn bearings_use_intrinsics() {
        let cloud = affine_raster(16, 16, 1);
        let cam = camera(16, 16);
        let s = filter_and_sample(&cloud, &cam, 4, 1.0).unwrap();
        for x in &s.frames[0] {
            assert_relative_eq!(x.bearing, (x.pixel - Vector2::new(8.0, 8.0)) / 100.0);
        }
    }

    #[test]
    fn interpolation_at_node_and_center() {
        let cloud = affine_raster(10, 10, 1);
        let node = &cloud.frames[0].entries[3 * 10 + 4];
        let (p, c) = cloud.interpolate_at(0, &Vector2::new(4.0, 3.0)).unwrap();
        assert_eq!(p, node.point);
        assert_eq!(c, node.confidence);

        let idx = [(4, 3), (5, 3), (4, 4), (5, 4)];
        let mean_p = idx.iter().map(|(c, r)| cloud.frames[0].entries[r * 10 + c].point).sum::<Vector3<f64>>() / 4.0;
        let mean_c = idx.iter().map(|(c, r)| cloud.frames[0].entries[r * 10 + c].confidence).sum::<f64>() / 4.0;
        let (p, c) = cloud.interpolate_at(0, &Vector2::new(4.5, 3.5)).unwrap();
        assert_relative_eq!(p, mean_p, epsilon = 1e-12);
        assert_relative_eq!(c, mean_c, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_exact_for_affine_raster() {
        let cloud = affine_raster(10, 10, 1);
        for (x, y) in [(0.3, 0.7), (8.99, 0.01), (9.0, 9.0), (2.25, 6.5)] {
            let (p, c) = cloud.interpolate_at(0, &Vector2::new(x, y)).unwrap();
            assert_relative_eq!(p, Vector3::new(0.1 * x + 1.0, -0.2 * y + 0.5 * x, 3.0 + 0.01 * y), epsilon = 1e-12);
            assert_relative_eq!(c, 2.0 + 0.05 * x + 0.1 * y, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_errors() {
        let mut cloud = affine_raster(10, 10, 1);
        assert!(matches!(cloud.interpolate_at(0, &Vector2::new(-1.0, -1.0)), Err(CloudError::OutOfBounds { .. })));
        assert!(matches!(cloud.interpolate_at(0, &Vector2::new(9.5, 2.0)), Err(CloudError::OutOfBounds { .. })));
        cloud.frames[0].entries[2 * 10 + 3] = CloudEntry::invalid(Vector2::new(3.0, 2.0));
        assert_eq!(cloud.interpolate_at(0, &Vector2::new(2.5, 1.5)), Err(CloudError::NeighborInvalid { col: 3, row: 2 }));
        cloud.dense_raster = false;
        assert_eq!(cloud.interpolate_at(0, &Vector2::new(1.0, 1.0)), Err(CloudError::NotRaster(0)));
    }

    fn sampled_with_points(points: &[Vector3<f64>]) -> SampledSet {
        let frame = points
            .iter()
            .map(|p| Sample { pixel: Vector2::zeros(), bearing: Vector2::zeros(), point: *p, confidence: 2.0, region: 99 })
            .collect();
        SampledSet { k: points.len(), frames: vec![frame] }
    }

    #[test]
    fn regions_one_by_one() {
        let mut s = sampled_with_points(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(5.0, -3.0, 1.0)]);
        let g = assign_regions(&mut s, &camera(90, 90), RegionDims::new(1, 1)).unwrap();
        assert_eq!(g.num_regions(), 1);
        assert!(g.adjacency.is_empty());
        assert!(s.iter().all(|(_, x)| x.region == 0));
    }

    #[test]
    fn regions_three_by_three() {
        // center and the top-left/bottom-right corners of a 90x90 image
        let mut s = sampled_with_points(&[Vector3::new(0.0, 0.0, 2.0), Vector3::new(-0.44, -0.44, 1.0), Vector3::new(0.44, 0.44, 1.0), Vector3::new(0.0, 0.0, -1.0)]);
        let g = assign_regions(&mut s, &camera(90, 90), RegionDims::default()).unwrap();
        assert_eq!(g.num_regions(), 9);
        assert_eq!(g.adjacency.len(), 12);
        assert_eq!(g.assignment[0][..3], [4, 0, 8]);
        assert_eq!(g.clamped, 1);
        for (j, l) in &g.adjacency {
            assert!(g.are_adjacent(*l, *j));
        }
        assert!(!g.are_adjacent(0, 4));
    }

    #[test]
    fn lifting() {
        let p = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(lift_to_i0(&p, 1.0, &Extrinsics::identity()).unwrap(), p);
        assert_eq!(lift_to_i0(&p, 2.0, &Extrinsics::identity()).unwrap(), Vector3::new(2.0, 0.0, 0.0));
        let e = Extrinsics { rot_imu_cam: exp_so3(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).unwrap(), trans_imu_cam: Vector3::new(0.1, 0.0, 0.0) };
        assert_relative_eq!(lift_to_i0(&p, 2.0, &e).unwrap(), Vector3::new(0.1, 2.0, 0.0), epsilon = 1e-12);
        assert_eq!(lift_to_i0(&p, 0.0, &e), Err(CloudError::NonPositiveScale(0.0)));
    }
}
