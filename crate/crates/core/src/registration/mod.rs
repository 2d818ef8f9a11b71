//! Pairwise rigid registration: point-to-plane ICP from a seed, and
//! feature-correspondence RANSAC that needs no seed.
//!
//! All transforms map the source (query) frame into the target (map node) frame.

mod fine;
mod icp;
mod matching;
mod ransac;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform3;

pub use fine::{
    yaw_from_consecutive, FeatureMatches, FineConfig, FineLocalizer, FineMethod, FineResult, RegistrationReport,
};
pub use icp::{icp_point_to_plane, IcpConfig, IcpTarget};
pub use matching::{match_features, MatchConfig};
pub use ransac::{ransac_register, RansacConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub feature_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform3,
    /// Point-to-plane cost for ICP; sum of squared inlier distances for RANSAC.
    pub final_cost: f64,
    pub inlier_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Per accepted iteration, the cost of that iteration's correspondences
    /// before and after the update.
    pub iteration_costs: Vec<(f64, f64)>,
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (Kabsch, reflection-corrected).
pub fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> RigidTransform3 {
    debug_assert_eq!(src.len(), dst.len());
    let n = src.len().max(1) as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v").transpose();
    let det = (v * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r = v * correction * u.transpose();
    RigidTransform3::new(r, cd - r * cs)
}

/// RMS distance between `points` mapped by `estimate` and by `truth`.
pub fn alignment_rms(estimate: &RigidTransform3, truth: &RigidTransform3, points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let s: f64 = points.iter().map(|p| (estimate.apply(p) - truth.apply(p)).norm_squared()).sum();
    (s / points.len() as f64).sqrt()
}

/// Translation and rotation-angle error of `estimate` relative to `truth`.
pub fn transform_error(estimate: &RigidTransform3, truth: &RigidTransform3) -> (f64, f64) {
    let d = truth.inverse().compose(estimate);
    (d.translation.norm(), d.rotation_angle())
}
