use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{icp::IcpTarget, match_features, Correspondence, ransac_register, IcpConfig, MatchConfig, RansacConfig, RegistrationResult};
use crate::cloud::{estimate_normals, preprocess_for_registration, voxel_index, PointCloud, PreprocessConfig, DEFAULT_NORMAL_NEIGHBORS};
use crate::error::{LockitError, Result};
use crate::features::{local_features, FeatureBackend, LocalFeatureCloud};
use crate::geometry::{Pose2, RigidTransform3};
use crate::topo_map::{MapNode, TopoMap};

const MIN_MOTION_M: f64 = 1e-6;

/// Heading of the motion from `prev` to `curr`.
pub fn yaw_from_consecutive(prev: &Pose2, curr: &Pose2) -> Result<f64> {
    let (dx, dy) = (curr.x - prev.x, curr.y - prev.y);
    if dx.hypot(dy) < MIN_MOTION_M {
        return Err(LockitError::DegenerateMotion);
    }
    Ok(dy.atan2(dx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FineMethod {
    #[default]
    Dlf,
    Icp,
    None,
}

impl FineMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FineMethod::Dlf => "dlf",
            FineMethod::Icp => "icp",
            FineMethod::None => "none",
        }
    }
}

impl std::str::FromStr for FineMethod {
    type Err = LockitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dlf" => Ok(FineMethod::Dlf),
            "icp" => Ok(FineMethod::Icp),
            "none" => Ok(FineMethod::None),
            other => Err(LockitError::InvalidConfig(format!("unknown fine method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineConfig {
    pub icp: IcpConfig,
    pub ransac: RansacConfig,
    pub matching: MatchConfig,
    /// Refine the feature-RANSAC result with point-to-plane ICP.
    pub polish: bool,
    /// Voxel size for thinning the clouds to matching keypoints.
    pub keypoint_voxel_m: f64,
    pub normal_neighbors: usize,
    /// Scale each local feature to unit length before matching.
    pub normalize_local_features: bool,
}

impl Default for FineConfig {
    fn default() -> Self {
        FineConfig {
            icp: IcpConfig::default(),
            ransac: RansacConfig::default(),
            matching: MatchConfig::default(),
            polish: true,
            keypoint_voxel_m: 0.6,
            normal_neighbors: DEFAULT_NORMAL_NEIGHBORS,
            normalize_local_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineResult {
    pub method: FineMethod,
    pub node_id: usize,
    /// Planar seed handed to ICP.
    pub seed: Option<Pose2>,
    /// Query frame to node frame.
    pub transform: RigidTransform3,
    /// Query frame to world frame.
    pub global: RigidTransform3,
    pub pose: Pose2,
    pub registration: Option<RegistrationResult>,
    /// Why the coarse pose was returned instead of a registration result.
    pub fallback: Option<String>,
    pub wall_time_s: f64,
}

/// One registration record, as written to the per-query report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub iter: usize,
    pub method: FineMethod,
    pub node_id: usize,
    pub seed_pose: Option<Pose2>,
    pub refined_pose: Pose2,
    /// Row-major 4×4 query-to-world transform.
    pub refined_transform: [f64; 16],
    pub cost: Option<f64>,
    pub inliers: Option<usize>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub fallback: Option<String>,
    pub wall_time_s: f64,
}

impl FineResult {
    pub fn report(&self, iter: usize) -> RegistrationReport {
        let reg = self.registration.as_ref();
        RegistrationReport {
            iter,
            method: self.method,
            node_id: self.node_id,
            seed_pose: self.seed,
            refined_pose: self.pose,
            refined_transform: self.global.to_homogeneous(),
            cost: reg.map(|r| r.final_cost),
            inliers: reg.map(|r| r.inlier_count),
            iterations: reg.map(|r| r.iterations),
            converged: reg.map(|r| r.converged),
            fallback: self.fallback.clone(),
            wall_time_s: self.wall_time_s,
        }
    }
}

fn node_transform(node: &MapNode) -> RigidTransform3 {
    RigidTransform3::from_planar(node.x, node.y, node.yaw.unwrap_or(0.0))
}

/// Indices of the first point falling in each voxel, in input order.
fn keypoint_indices(points: &[nalgebra::Point3<f64>], voxel_m: f64) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    (0..points.len())
        .filter(|&i| seen.insert(voxel_index(&points[i], voxel_m)))
        .collect()
}

#[derive(Debug)]
struct Keypoints {
    cloud: PointCloud,
    features: LocalFeatureCloud,
}

/// Query-to-node feature correspondences, indexing the two keypoint clouds.
#[derive(Debug, Clone)]
pub struct FeatureMatches {
    pub query_keypoints: PointCloud,
    pub node_keypoints: PointCloud,
    pub correspondences: Vec<Correspondence>,
}

/// Fine registration of query scans against map nodes, with per-node caches.
pub struct FineLocalizer {
    map: Arc<TopoMap>,
    backend: Arc<dyn FeatureBackend>,
    preprocess: PreprocessConfig,
    cfg: FineConfig,
    targets: Mutex<HashMap<usize, Arc<IcpTarget>>>,
    keypoints: Mutex<HashMap<usize, Arc<Keypoints>>>,
}

impl FineLocalizer {
    pub fn new(map: Arc<TopoMap>, backend: Arc<dyn FeatureBackend>, preprocess: PreprocessConfig, cfg: FineConfig) -> Self {
        FineLocalizer {
            map,
            backend,
            preprocess,
            cfg,
            targets: Mutex::new(HashMap::new()),
            keypoints: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &FineConfig {
        &self.cfg
    }

    /// Registration-ready version of a raw query cloud.
    pub fn prepare_query(&self, raw: &PointCloud) -> Result<PointCloud> {
        preprocess_for_registration(raw, &self.preprocess)
    }

    fn node_cloud(&self, id: usize) -> Result<PointCloud> {
        preprocess_for_registration(&*self.map.node_cloud(id)?, &self.preprocess)
    }

    fn target(&self, id: usize) -> Result<Arc<IcpTarget>> {
        if let Some(t) = self.targets.lock().expect("cache lock").get(&id) {
            return Ok(Arc::clone(t));
        }
        let cloud = self.node_cloud(id)?;
        let t = Arc::new(IcpTarget::new(estimate_normals(&cloud, self.cfg.normal_neighbors)?));
        self.targets.lock().expect("cache lock").insert(id, Arc::clone(&t));
        Ok(t)
    }

    fn keypoints_of(&self, scan_id: &str, cloud: &PointCloud) -> Result<Keypoints> {
        let mut f = local_features(self.backend.as_ref(), scan_id, cloud)?;
        if self.cfg.normalize_local_features {
            f = f.l2_normalized();
        }
        let idx = keypoint_indices(&f.points, self.cfg.keypoint_voxel_m);
        let points: Vec<_> = idx.iter().map(|&i| f.points[i]).collect();
        let feats: Vec<f32> = idx.iter().flat_map(|&i| f.feature(i).iter().copied()).collect();
        let features = LocalFeatureCloud::new(points.clone(), f.dim, feats)?;
        Ok(Keypoints {
            cloud: PointCloud::new(points),
            features,
        })
    }

    fn node_keypoints(&self, node: &MapNode) -> Result<Arc<Keypoints>> {
        if let Some(k) = self.keypoints.lock().expect("cache lock").get(&node.id) {
            return Ok(Arc::clone(k));
        }
        let cloud = self.node_cloud(node.id)?;
        let k = Arc::new(self.keypoints_of(&node.scan_id, &cloud)?);
        self.keypoints.lock().expect("cache lock").insert(node.id, Arc::clone(&k));
        Ok(k)
    }

    fn finish(
        &self,
        method: FineMethod,
        node: &MapNode,
        seed: Option<Pose2>,
        registration: RegistrationResult,
        started: Instant,
    ) -> FineResult {
        let transform = registration.transform;
        let global = node_transform(node).compose(&transform);
        FineResult {
            method,
            node_id: node.id,
            seed,
            transform,
            global,
            pose: global.to_pose2(),
            registration: Some(registration),
            fallback: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }

    /// Coarse pose passed through unchanged, tagged with the reason.
    pub fn coarse_result(&self, method: FineMethod, coarse: &Pose2, reason: Option<String>) -> Result<FineResult> {
        let node = self.map.nearest_node(coarse.x, coarse.y)?;
        let global = coarse.to_transform();
        Ok(FineResult {
            method,
            node_id: node.id,
            seed: None,
            transform: node_transform(node).inverse().compose(&global),
            global,
            pose: *coarse,
            registration: None,
            fallback: reason,
            wall_time_s: 0.0,
        })
    }

    /// Point-to-plane ICP against the node nearest `coarse`, seeded at the coarse
    /// position with the heading of the last coarse motion (or the coarse heading
    /// when there was no motion).
    pub fn localize_icp(&self, query: &PointCloud, coarse: &Pose2, prev_coarse: Option<&Pose2>) -> Result<FineResult> {
        let started = Instant::now();
        let node = self.map.nearest_node(coarse.x, coarse.y)?;
        let yaw = match prev_coarse.map(|p| yaw_from_consecutive(p, coarse)) {
            Some(Ok(y)) => y,
            _ => coarse.theta,
        };
        let seed = Pose2::new(coarse.x, coarse.y, yaw);
        let seed_t = node_transform(node).inverse().compose(&seed.to_transform());
        let target = self.target(node.id)?;
        let reg = target.register(query, &seed_t, &self.cfg.icp)?;
        Ok(self.finish(FineMethod::Icp, node, Some(seed), reg, started))
    }

    /// Feature matching plus RANSAC against the node nearest `coarse`; the coarse
    /// heading is not used. Recoverable failures return the coarse pose flagged.
    pub fn localize_dlf(&self, query: &PointCloud, query_scan_id: &str, coarse: &Pose2) -> Result<FineResult> {
        let started = Instant::now();
        let node = self.map.nearest_node(coarse.x, coarse.y)?;
        match self.dlf_inner(query, query_scan_id, node) {
            Ok(reg) => Ok(self.finish(FineMethod::Dlf, node, None, reg, started)),
            Err(
                e @ (LockitError::NoConsensus(_)
                | LockitError::TooFewCorrespondences(_)
                | LockitError::BackendUnavailable(_)
                | LockitError::EmptyCloud),
            ) => {
                log::debug!("feature registration fell back to coarse pose: {e}");
                let mut r = self.coarse_result(FineMethod::Dlf, coarse, Some(e.to_string()))?;
                r.wall_time_s = started.elapsed().as_secs_f64();
                Ok(r)
            }
            Err(e) => Err(e),
        }
    }

    fn dlf_inner(&self, query: &PointCloud, query_scan_id: &str, node: &MapNode) -> Result<RegistrationResult> {
        let matches = self.match_to_node(query, query_scan_id, node.id)?;
        self.register_matches(query, node.id, &matches)
    }

    /// Keypoints of the query and of node `node_id` with their feature correspondences.
    pub fn match_to_node(&self, query: &PointCloud, query_scan_id: &str, node_id: usize) -> Result<FeatureMatches> {
        let node = self.map.node(node_id);
        let target_kp = self.node_keypoints(node)?;
        let query_kp = self.keypoints_of(query_scan_id, query)?;
        let correspondences = match_features(&query_kp.features, &target_kp.features, &self.cfg.matching)?;
        Ok(FeatureMatches {
            query_keypoints: query_kp.cloud,
            node_keypoints: target_kp.cloud.clone(),
            correspondences,
        })
    }

    /// RANSAC over `matches`, then the optional point-to-plane polish of `query`
    /// against the node cloud.
    pub fn register_matches(&self, query: &PointCloud, node_id: usize, matches: &FeatureMatches) -> Result<RegistrationResult> {
        let coarse = ransac_register(&matches.query_keypoints, &matches.node_keypoints, &matches.correspondences, &self.cfg.ransac)?;
        if !self.cfg.polish {
            return Ok(coarse);
        }
        let target = self.target(node_id)?;
        match target.register(query, &coarse.transform, &self.cfg.icp) {
            Ok(polished) => Ok(RegistrationResult {
                inlier_count: polished.inlier_count,
                iterations: coarse.iterations + polished.iterations,
                ..polished
            }),
            Err(e @ (LockitError::DegenerateGeometry(_) | LockitError::EmptyCorrespondences)) => {
                log::debug!("skipping ICP polish: {e}");
                Ok(coarse)
            }
            Err(e) => Err(e),
        }
    }

    /// Dispatches on `method`; `None` returns the coarse pose.
    pub fn localize(
        &self,
        method: FineMethod,
        query: &PointCloud,
        query_scan_id: &str,
        coarse: &Pose2,
        prev_coarse: Option<&Pose2>,
    ) -> Result<FineResult> {
        match method {
            FineMethod::Dlf => self.localize_dlf(query, query_scan_id, coarse),
            FineMethod::Icp => self.localize_icp(query, coarse, prev_coarse),
            FineMethod::None => self.coarse_result(FineMethod::None, coarse, None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FileBackend, SyntheticBackend};
    use crate::geometry::wrap_angle;
    use crate::registration::icp::tests::walls_scene;
    use crate::registration::transform_error;

    #[test]
    fn yaw_examples() {
        let p = |x, y| Pose2::new(x, y, 0.0);
        assert_eq!(yaw_from_consecutive(&p(0.0, 0.0), &p(1.0, 0.0)).unwrap(), 0.0);
        assert!((yaw_from_consecutive(&p(0.0, 0.0), &p(0.0, 1.0)).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((yaw_from_consecutive(&p(1.0, 1.0), &p(0.0, 0.0)).unwrap() + 0.75 * std::f64::consts::PI).abs() < 1e-15);
        assert!(matches!(yaw_from_consecutive(&p(2.0, 2.0), &p(2.0, 2.0)), Err(LockitError::DegenerateMotion)));
    }

    fn single_node_map(cloud: PointCloud, pose: Pose2) -> TopoMap {
        let node = MapNode {
            id: 0,
            x: pose.x,
            y: pose.y,
            yaw: Some(pose.theta),
            scan_id: "node0".into(),
            cloud_ref: String::new(),
            descriptor: crate::features::GlobalDescriptor::new(vec![0.0; 4]),
        };
        TopoMap::from_nodes(vec![node], vec![Arc::new(cloud)], 1.0, "synthetic").unwrap()
    }

    fn no_ground() -> PreprocessConfig {
        PreprocessConfig {
            ground_distance_m: 0.0,
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn dlf_recovers_large_yaw_without_seed() {
        let scene = walls_scene(5);
        let node_pose = Pose2::new(10.0, 5.0, 0.3);
        let map = single_node_map(scene.clone(), node_pose);
        let backend = SyntheticBackend::new();
        let fine = FineLocalizer::new(Arc::new(map), Arc::new(backend), no_ground(), FineConfig::default());
        // robot pose in the node frame
        let rel = RigidTransform3::from_planar(0.5, 0.0, 120f64.to_radians());
        let query = fine.prepare_query(&scene.transformed(&rel.inverse())).unwrap();
        let truth = RigidTransform3::from_planar(node_pose.x, node_pose.y, node_pose.theta).compose(&rel);
        let mut poses = Vec::new();
        for theta in [0.0, 2.0] {
            let coarse = Pose2::new(10.2, 5.1, theta);
            let r = fine.localize_dlf(&query, "q", &coarse).unwrap();
            assert!(r.fallback.is_none());
            let (t, a) = transform_error(&r.global, &truth);
            assert!(t < 0.1 && a < 1f64.to_radians(), "t={t} a={}", a.to_degrees());
            poses.push(r.pose);
        }
        assert_eq!(poses[0], poses[1]);
    }

    #[test]
    fn dlf_on_identical_cloud_is_identity() {
        let scene = walls_scene(6);
        let map = single_node_map(scene.clone(), Pose2::origin());
        let backend = SyntheticBackend::new();
        let fine = FineLocalizer::new(Arc::new(map), Arc::new(backend), no_ground(), FineConfig::default());
        let query = fine.prepare_query(&scene).unwrap();
        let r = fine.localize_dlf(&query, "q", &Pose2::origin()).unwrap();
        let (t, a) = transform_error(&r.transform, &RigidTransform3::identity());
        assert!(t < 1e-6 && a < 1e-6);
    }

    #[test]
    fn dlf_missing_features_falls_back() {
        let scene = walls_scene(7);
        let map = single_node_map(scene.clone(), Pose2::origin());
        let dir = tempfile::tempdir().unwrap();
        let backend = FileBackend::new(dir.path());
        let fine = FineLocalizer::new(Arc::new(map), Arc::new(backend), no_ground(), FineConfig::default());
        let coarse = Pose2::new(0.3, 0.2, 1.0);
        let r = fine.localize_dlf(&scene, "q", &coarse).unwrap();
        assert_eq!(r.pose, coarse);
        assert!(r.fallback.unwrap().contains("unavailable"));
    }

    #[test]
    fn icp_from_perturbed_seed() {
        let scene = walls_scene(8);
        let node_pose = Pose2::new(-3.0, 2.0, -0.5);
        let map = single_node_map(scene.clone(), node_pose);
        let backend = SyntheticBackend::new();
        let fine = FineLocalizer::new(Arc::new(map), Arc::new(backend), no_ground(), FineConfig::default());
        let truth_pose = Pose2::new(-3.0, 2.0, -0.5);
        let query = fine.prepare_query(&scene).unwrap();
        // coarse 0.8 m off, heading 10° off, no usable previous pose
        let coarse = Pose2::new(-3.0 + 0.8, 2.0, -0.5 + 10f64.to_radians());
        let r = fine.localize_icp(&query, &coarse, Some(&coarse)).unwrap();
        assert!(r.pose.distance_to(&truth_pose) < 0.1);
        assert!(wrap_angle(r.pose.theta - truth_pose.theta).abs() < 1f64.to_radians());
        assert!(r.registration.unwrap().iteration_costs.iter().all(|(a, b)| b <= a));
    }

    #[test]
    fn report_serializes() {
        let scene = walls_scene(9);
        let map = single_node_map(scene.clone(), Pose2::origin());
        let backend = SyntheticBackend::new();
        let fine = FineLocalizer::new(Arc::new(map), Arc::new(backend), no_ground(), FineConfig::default());
        let r = fine.localize(FineMethod::Icp, &scene, "q", &Pose2::new(0.1, 0.0, 0.0), None).unwrap();
        let json = serde_json::to_string(&r.report(3)).unwrap();
        let back: RegistrationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.iter, 3);
        assert_eq!(back.method, FineMethod::Icp);
        let none = fine.localize(FineMethod::None, &scene, "q", &Pose2::new(0.1, 0.0, 0.0), None).unwrap();
        assert_eq!(none.pose, Pose2::new(0.1, 0.0, 0.0));
    }
}
