//! Point-cloud containers and the preprocessing pipeline run before
//! descriptor extraction and before registration.

mod io;

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LockitError, Result};
use crate::geometry::RigidTransform3;
use crate::kdtree::KdTree;

pub use io::{load_cloud, read_lpcd, read_text_cloud, save_lpcd, write_lpcd, LPCD_MAGIC};

/// Points in meters, sensor frame. Intensity is carried through untouched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        PointCloud {
            points,
            intensity: None,
        }
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Self {
        PointCloud::new(xyz.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn as_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn transformed(&self, t: &RigidTransform3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            intensity: self.intensity.clone(),
        }
    }

    fn select(&self, keep: impl Fn(usize, &Point3<f64>) -> bool) -> PointCloud {
        let mut points = Vec::new();
        let mut intensity = self.intensity.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(i, p) {
                points.push(*p);
                if let (Some(out), Some(src)) = (intensity.as_mut(), self.intensity.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        PointCloud { points, intensity }
    }
}

/// A cloud with one unit normal per point.
#[derive(Debug, Clone)]
pub struct NormalCloud {
    pub base: PointCloud,
    pub normals: Vec<Vector3<f64>>,
}

impl NormalCloud {
    pub fn new(base: PointCloud, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if base.len() != normals.len() {
            return Err(LockitError::DimensionMismatch {
                expected: base.len(),
                actual: normals.len(),
            });
        }
        if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(LockitError::DegenerateCloud("normals must have unit length".into()));
        }
        Ok(NormalCloud { base, normals })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub max_range_m: f64,
    pub scale_factor: f64,
    pub voxel_size_m: f64,
    pub ground_distance_m: f64,
    pub normalize: bool,
    /// Re-center on the centroid before scaling (for datasets whose clouds are
    /// not already in the sensor frame).
    pub recenter: bool,
    pub ground_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_range_m: 50.0,
            scale_factor: 50.0,
            voxel_size_m: 0.3,
            ground_distance_m: 0.2,
            normalize: true,
            recenter: false,
            ground_seed: 7,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_range_m > 0.0
            && self.scale_factor > 0.0
            && self.voxel_size_m > 0.0
            && self.ground_distance_m >= 0.0
            && self.max_range_m.is_finite()
            && self.scale_factor.is_finite()
            && self.voxel_size_m.is_finite()
            && self.ground_distance_m.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LockitError::InvalidConfig(format!("bad preprocessing parameters: {self:?}")))
        }
    }
}

/// Keeps the points whose distance from the origin is at most `max_range_m`.
pub fn crop_range(cloud: &PointCloud, max_range_m: f64) -> PointCloud {
    let r2 = max_range_m * max_range_m;
    cloud.select(|_, p| p.coords.norm_squared() <= r2)
}

/// Divides every coordinate by `scale_factor`.
pub fn center_and_scale(cloud: &PointCloud, scale_factor: f64) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| Point3::from(p.coords / scale_factor)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

fn recenter(cloud: &PointCloud) -> PointCloud {
    if cloud.is_empty() {
        return cloud.clone();
    }
    let c = cloud.points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / cloud.len() as f64;
    PointCloud {
        points: cloud.points.iter().map(|p| p - c).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Integer voxel index of a point for an origin-anchored grid.
pub fn voxel_index(p: &Point3<f64>, voxel_size_m: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel_size_m).floor() as i64,
        (p.y / voxel_size_m).floor() as i64,
        (p.z / voxel_size_m).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel by their centroid. Output order
/// follows the first point seen in each voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size_m: f64) -> PointCloud {
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(cloud.len());
    let mut sums: Vec<(Vector3<f64>, f64, usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = voxel_index(p, voxel_size_m);
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push((Vector3::zeros(), 0.0, 0));
            sums.len() - 1
        });
        let s = &mut sums[slot];
        s.0 += p.coords;
        s.1 += cloud.intensity.as_ref().map_or(0.0, |v| v[i] as f64);
        s.2 += 1;
    }
    let points = sums
        .iter()
        .map(|(sum, _, n)| Point3::from(sum / *n as f64))
        .collect();
    let intensity = cloud
        .intensity
        .as_ref()
        .map(|_| sums.iter().map(|(_, s, n)| (*s / *n as f64) as f32).collect());
    PointCloud { points, intensity }
}

/// Plane `n·p + d = 0` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        (self.normal.dot(&p.coords) + self.offset).abs()
    }

    fn through(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len < 1e-12 {
            return None;
        }
        let normal = n / len;
        Some(Plane {
            normal,
            offset: -normal.dot(&a.coords),
        })
    }
}

const GROUND_TRIALS: usize = 200;
const GROUND_MAX_TILT_DEG: f64 = 30.0;

/// Fits the dominant near-horizontal plane by seeded random sample consensus.
/// Only hypotheses whose normal lies within 30° of vertical compete; returns
/// `None` when no such hypothesis exists.
pub fn fit_ground_plane(cloud: &PointCloud, ground_distance_m: f64, rng_seed: u64) -> Result<Option<Plane>> {
    if cloud.len() < 3 {
        return Err(LockitError::DegenerateCloud(format!(
            "ground removal needs at least 3 points, got {}",
            cloud.len()
        )));
    }
    let cos_gate = GROUND_MAX_TILT_DEG.to_radians().cos();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = cloud.len();
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..GROUND_TRIALS {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let Some(plane) = Plane::through(&cloud.points[i], &cloud.points[j], &cloud.points[k]) else {
            continue;
        };
        if plane.normal.z.abs() < cos_gate {
            continue;
        }
        let count = cloud
            .points
            .iter()
            .filter(|p| plane.distance(p) <= ground_distance_m)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, plane));
        }
    }
    let Some((_, plane)) = best else {
        return Ok(None);
    };
    // least-squares refit on the consensus set
    let inliers: Vec<&Point3<f64>> = cloud
        .points
        .iter()
        .filter(|p| plane.distance(p) <= ground_distance_m)
        .collect();
    if inliers.len() < 3 {
        return Ok(Some(plane));
    }
    let centroid = inliers.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / inliers.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &inliers {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let normal = smallest_eigenvector(&cov);
    if normal.z.abs() < cos_gate {
        return Ok(Some(plane));
    }
    Ok(Some(Plane {
        normal,
        offset: -normal.dot(&centroid),
    }))
}

/// Removes the points lying within `ground_distance_m` of the fitted ground plane.
pub fn remove_ground(cloud: &PointCloud, ground_distance_m: f64, rng_seed: u64) -> Result<PointCloud> {
    match fit_ground_plane(cloud, ground_distance_m, rng_seed)? {
        Some(plane) => Ok(cloud.select(|_, p| plane.distance(p) > ground_distance_m)),
        None => Ok(cloud.clone()),
    }
}

pub(crate) fn smallest_eigenvector(cov: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = 0;
    for k in 1..3 {
        if eig.eigenvalues[k] < eig.eigenvalues[idx] {
            idx = k;
        }
    }
    let v: Vector3<f64> = eig.eigenvectors.column(idx).into_owned();
    v.normalize()
}

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 20;

/// PCA normals from the `k_neighbors` nearest points, oriented toward the origin.
pub fn estimate_normals(cloud: &PointCloud, k_neighbors: usize) -> Result<NormalCloud> {
    if k_neighbors < 3 {
        return Err(LockitError::DegenerateCloud(format!("k_neighbors must be >= 3, got {k_neighbors}")));
    }
    if cloud.len() < k_neighbors {
        return Err(LockitError::DegenerateCloud(format!(
            "normal estimation needs at least {k_neighbors} points, got {}",
            cloud.len()
        )));
    }
    let tree = KdTree::new(cloud.as_arrays());
    let normals = cloud
        .points
        .iter()
        .map(|p| {
            let nn = tree.knn(&[p.x, p.y, p.z], k_neighbors);
            let centroid = nn
                .iter()
                .fold(Vector3::zeros(), |a, &(i, _)| a + cloud.points[i].coords)
                / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(i, _) in &nn {
                let d = cloud.points[i].coords - centroid;
                cov += d * d.transpose();
            }
            let mut n = smallest_eigenvector(&cov);
            if n.dot(&(-p.coords)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect();
    NormalCloud::new(cloud.clone(), normals)
}

/// crop → (recenter) → scale → voxel → ground removal. Voxel size and ground
/// distance are divided by the scale factor so they keep their metric meaning.
pub fn preprocess_for_descriptor(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let mut c = crop_range(cloud, cfg.max_range_m);
    if cfg.recenter {
        c = recenter(&c);
    }
    let scale = if cfg.normalize { cfg.scale_factor } else { 1.0 };
    c = center_and_scale(&c, scale);
    c = voxel_downsample(&c, cfg.voxel_size_m / scale);
    if c.len() < 3 {
        return Ok(c);
    }
    remove_ground(&c, cfg.ground_distance_m / scale, cfg.ground_seed)
}

/// Same pipeline without rescaling; metric units are preserved.
pub fn preprocess_for_registration(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let c = crop_range(cloud, cfg.max_range_m);
    let c = voxel_downsample(&c, cfg.voxel_size_m);
    if c.len() < 3 {
        return Ok(c);
    }
    remove_ground(&c, cfg.ground_distance_m, cfg.ground_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    fn grid_plane(n: usize, step: f64, z: f64) -> Vec<[f64; 3]> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push([i as f64 * step - n as f64 * step / 2.0, j as f64 * step - n as f64 * step / 2.0, z]);
            }
        }
        v
    }

    #[test]
    fn crop_keeps_points_inside_radius() {
        let c = PointCloud::from_xyz(&[[49.9, 0.0, 0.0], [50.1, 0.0, 0.0]]);
        let out = crop_range(&c, 50.0);
        assert_eq!(out.points, vec![Point3::new(49.9, 0.0, 0.0)]);
        assert!(crop_range(&PointCloud::default(), 50.0).is_empty());
    }

    #[test]
    fn crop_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<[f64; 3]> = Vec::new();
        while pts.len() < 1000 {
            let p = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 100.0 * 100.0 {
                pts.push(p);
            }
        }
        let expected = pts
            .iter()
            .filter(|p: &&[f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= 50.0)
            .count();
        assert_eq!(crop_range(&PointCloud::from_xyz(&pts), 50.0).len(), expected);
    }

    #[test]
    fn scaling_examples() {
        let c = PointCloud::from_xyz(&[[25.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let s = center_and_scale(&c, 50.0);
        assert_eq!(s.points[0], Point3::new(0.5, 0.0, 0.0));
        assert_eq!(s.points[1], Point3::origin());
    }

    #[test]
    fn scaled_cropped_cloud_is_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), rng.random_range(-10.0..10.0)])
            .collect();
        let out = center_and_scale(&crop_range(&PointCloud::from_xyz(&pts), 50.0), 50.0);
        let max = out.points.iter().flat_map(|p| p.iter().copied()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1.0);
    }

    #[test]
    fn voxel_examples() {
        let c = PointCloud::from_xyz(&[[0.1, 0.1, 0.1], [0.11, 0.1, 0.1]]);
        let out = voxel_downsample(&c, 0.3);
        assert_eq!(out.len(), 1);
        assert!((out.points[0] - Point3::new(0.105, 0.1, 0.1)).norm() < 1e-12);

        let c = PointCloud::from_xyz(&[[0.1, 0.1, 0.1], [0.4, 0.1, 0.1]]);
        assert_eq!(voxel_downsample(&c, 0.3).len(), 2);
    }

    #[test]
    fn voxel_count_matches_independent_census() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..5000)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)])
            .collect();
        let census: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| ((p[0] / 0.3).floor() as i64, (p[1] / 0.3).floor() as i64, (p[2] / 0.3).floor() as i64))
            .collect();
        assert_eq!(voxel_downsample(&PointCloud::from_xyz(&pts), 0.3).len(), census.len());
    }

    #[test]
    fn ground_removed_box_kept() {
        let mut pts = grid_plane(40, 0.25, -1.8);
        let mut box_pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    box_pts.push([2.0 + i as f64 * 0.1, 1.0 + j as f64 * 0.1, -1.0 + k as f64 * 0.1]);
                }
            }
        }
        pts.extend(box_pts.iter().copied());
        let out = remove_ground(&PointCloud::from_xyz(&pts), 0.2, 1).unwrap();
        assert_eq!(out.len(), box_pts.len());
        assert_eq!(out.as_arrays(), box_pts);
    }

    #[test]
    fn vertical_wall_untouched() {
        let pts: Vec<[f64; 3]> = grid_plane(20, 0.2, 0.0).into_iter().map(|p| [3.0, p[0], p[1]]).collect();
        let c = PointCloud::from_xyz(&pts);
        assert_eq!(remove_ground(&c, 0.2, 9).unwrap(), c);
    }

    #[test]
    fn ground_removal_is_deterministic_and_checks_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-0.3..2.0)])
            .collect();
        let c = PointCloud::from_xyz(&pts);
        assert_eq!(remove_ground(&c, 0.1, 42).unwrap(), remove_ground(&c, 0.1, 42).unwrap());
        assert!(matches!(
            remove_ground(&PointCloud::from_xyz(&pts[..2]), 0.1, 0),
            Err(LockitError::DegenerateCloud(_))
        ));
    }

    #[test]
    fn plane_normals_are_vertical() {
        let c = PointCloud::from_xyz(&grid_plane(15, 0.2, 0.0));
        let nc = estimate_normals(&c, 20).unwrap();
        assert_eq!(nc.normals.len(), c.len());
        for n in &nc.normals {
            assert!((n.z.abs() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sphere_normals_point_inward() {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..60 {
                let th = (i as f64 + 0.5) / 30.0 * std::f64::consts::PI;
                let ph = j as f64 / 60.0 * 2.0 * std::f64::consts::PI;
                pts.push([5.0 * th.sin() * ph.cos(), 5.0 * th.sin() * ph.sin(), 5.0 * th.cos()]);
            }
        }
        let nc = estimate_normals(&PointCloud::from_xyz(&pts), 20).unwrap();
        for (p, n) in nc.base.points.iter().zip(&nc.normals) {
            let inward = -p.coords.normalize();
            assert!(n.dot(&inward) > 0.95, "normal {n:?} at {p:?}");
        }
    }

    #[test]
    fn normals_need_enough_points() {
        let c = PointCloud::from_xyz(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(estimate_normals(&c, 20).is_err());
        assert!(estimate_normals(&c, 2).is_err());
    }

    fn scene() -> PointCloud {
        let mut pts = grid_plane(120, 0.25, -1.8);
        for i in 0..60 {
            for k in 0..20 {
                pts.push([6.0, -3.0 + i as f64 * 0.1, -1.8 + k as f64 * 0.1]);
                pts.push([-4.0 + i as f64 * 0.1, 7.0, -1.8 + k as f64 * 0.1]);
            }
        }
        pts.push([60.0, 0.0, 0.0]);
        PointCloud::from_xyz(&pts)
    }

    #[test]
    fn descriptor_pipeline_normalizes_and_drops_ground() {
        let cfg = PreprocessConfig::default();
        let out = preprocess_for_descriptor(&scene(), &cfg).unwrap();
        assert!(!out.is_empty());
        for p in &out.points {
            assert!(p.iter().all(|v| v.abs() <= 1.0));
            // ground sits at z = -1.8 m => -0.036 after scaling
            assert!(p.z > -1.8 / 50.0 + cfg.ground_distance_m / 50.0 * 0.5);
        }
        assert!(preprocess_for_descriptor(&PointCloud::default(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn registration_pipeline_keeps_metric_scale() {
        let cfg = PreprocessConfig::default();
        let mut c = scene();
        c.points.push(Point3::new(25.0, 0.0, 1.0));
        let out = preprocess_for_registration(&c, &cfg).unwrap();
        assert!(out.points.iter().any(|p| (p - Point3::new(25.0, 0.0, 1.0)).norm() < 1e-12));
        assert!(out.points.iter().all(|p| p.coords.norm() <= cfg.max_range_m));
        assert!(preprocess_for_registration(&PointCloud::default(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn crop_is_idempotent() {
        let c = crop_range(&scene(), 50.0);
        assert_eq!(crop_range(&c, 50.0), c);
    }

    proptest! {
        #[test]
        fn crop_is_sub_multiset(pts in prop::collection::vec(prop::array::uniform3(-80.0f64..80.0), 0..100), r in 1.0f64..90.0) {
            let c = PointCloud::from_xyz(&pts);
            let out = crop_range(&c, r);
            prop_assert!(out.points.iter().all(|p| p.coords.norm() <= r));
            let mut it = c.points.iter();
            for p in &out.points {
                prop_assert!(it.any(|q| q == p));
            }
        }

        #[test]
        fn scale_roundtrip(pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 0..50), s in 0.1f64..100.0) {
            let c = PointCloud::from_xyz(&pts);
            let back = center_and_scale(&c, s);
            for (a, b) in c.points.iter().zip(&back.points) {
                prop_assert!((a - b * s).norm() < 1e-9);
            }
        }

        #[test]
        fn voxel_never_grows(pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 0..200), v in 0.05f64..2.0) {
            let c = PointCloud::from_xyz(&pts);
            let out = voxel_downsample(&c, v);
            let distinct: HashSet<_> = c.points.iter().map(|p| voxel_index(p, v)).collect();
            prop_assert!(out.len() <= c.len());
            prop_assert_eq!(out.len(), distinct.len());
        }

        #[test]
        fn registration_preserves_distances(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..300)
                .map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..4.0)])
                .collect();
            let cfg = PreprocessConfig { voxel_size_m: 1e-6, ..Default::default() };
            let out = preprocess_for_registration(&PointCloud::from_xyz(&pts), &cfg).unwrap();
            // every surviving point is an original point, so pairwise distances are unchanged
            for p in &out.points {
                prop_assert!(pts.iter().any(|q| (p - Point3::new(q[0], q[1], q[2])).norm() < 1e-9));
            }
        }
    }
}
