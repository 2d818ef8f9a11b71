use nalgebra::{Matrix6, Point3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::RegistrationResult;
use crate::cloud::{NormalCloud, PointCloud};
use crate::error::{LockitError, Result};
use crate::geometry::RigidTransform3;
use crate::kdtree::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub correspondence_distance_m: f64,
    /// Stop once an accepted step improves the cost by less than this fraction.
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            correspondence_distance_m: 1.0,
            tolerance: 1e-6,
        }
    }
}

/// Target cloud with normals and its search index, reusable across registrations.
#[derive(Debug)]
pub struct IcpTarget {
    cloud: NormalCloud,
    tree: KdTree<3>,
}

impl IcpTarget {
    pub fn new(cloud: NormalCloud) -> Self {
        let tree = KdTree::new(cloud.base.as_arrays());
        IcpTarget { cloud, tree }
    }

    pub fn cloud(&self) -> &NormalCloud {
        &self.cloud
    }

    /// Point-to-plane cost of `transform` and the gated pairs `(source, target)` it uses.
    fn evaluate(&self, source: &[Point3<f64>], transform: &RigidTransform3, gate_sq: f64) -> (f64, Vec<(usize, usize)>) {
        let mut cost = 0.0;
        let mut pairs = Vec::with_capacity(source.len());
        for (i, q) in source.iter().enumerate() {
            let tq = transform.apply(q);
            if let Some((j, d2)) = self.tree.nearest(&[tq.x, tq.y, tq.z]) {
                if d2 <= gate_sq {
                    let r = (self.cloud.base.points[j] - tq).dot(&self.cloud.normals[j]);
                    cost += r * r;
                    pairs.push((i, j));
                }
            }
        }
        (cost, pairs)
    }
}

/// Point-to-plane ICP of `source` onto `target` starting from `seed`.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &NormalCloud,
    seed: &RigidTransform3,
    cfg: &IcpConfig,
) -> Result<RegistrationResult> {
    IcpTarget::new(target.clone()).register(source, seed, cfg)
}

const STEP_SCALES: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

fn pair_cost(target: &NormalCloud, source: &[Point3<f64>], pairs: &[(usize, usize)], t: &RigidTransform3) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| {
            let r = (target.base.points[j] - t.apply(&source[i])).dot(&target.normals[j]);
            r * r
        })
        .sum()
}

impl IcpTarget {
    /// Alternates nearest-neighbor matching with a Gauss-Newton step on the
    /// linearized point-to-plane cost of those matches. A step is kept only if it
    /// does not raise the cost of the matches it was computed from; shorter steps
    /// are tried before giving up.
    pub fn register(&self, source: &PointCloud, seed: &RigidTransform3, cfg: &IcpConfig) -> Result<RegistrationResult> {
        if source.is_empty() || self.cloud.is_empty() {
            return Err(LockitError::EmptyCloud);
        }
        if !seed.is_valid(1e-6) {
            return Err(LockitError::InvalidConfig("ICP seed is not a rigid transform".into()));
        }
        let gate_sq = cfg.correspondence_distance_m * cfg.correspondence_distance_m;
        let src = &source.points;
        let mut transform = seed.orthonormalized();
        let (mut cost, mut pairs) = self.evaluate(src, &transform, gate_sq);
        if pairs.is_empty() {
            return Err(LockitError::EmptyCorrespondences);
        }
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;

        while iterations < cfg.max_iterations {
            let mut jtj = Matrix6::<f64>::zeros();
            let mut jtr = Vector6::<f64>::zeros();
            for &(i, j) in &pairs {
                let tq = transform.apply(&src[i]);
                let n = self.cloud.normals[j];
                let r = (tq - self.cloud.base.points[j]).dot(&n);
                let c: Vector3<f64> = tq.coords.cross(&n);
                let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
                jtj += row * row.transpose();
                jtr += row * r;
            }
            let eig = jtj.symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            if pairs.len() < 6 || !(lo > hi * 1e-10) {
                return Err(LockitError::DegenerateGeometry(format!(
                    "point-to-plane system is rank deficient ({} pairs, eigenvalue ratio {:.3e})",
                    pairs.len(),
                    lo / hi.max(f64::MIN_POSITIVE)
                )));
            }
            if cost <= f64::MIN_POSITIVE {
                converged = true;
                break;
            }
            let step = match jtj.cholesky() {
                Some(ch) => -ch.solve(&jtr),
                None => return Err(LockitError::DegenerateGeometry("normal matrix not positive definite".into())),
            };
            let accepted = STEP_SCALES.iter().find_map(|&scale| {
                let x = step * scale;
                let delta = RigidTransform3::from_scaled_axis(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]));
                let candidate = delta.compose(&transform).orthonormalized();
                let c = pair_cost(&self.cloud, src, &pairs, &candidate);
                (c <= cost).then_some((candidate, c))
            });
            let Some((candidate, matched_cost)) = accepted else {
                converged = true;
                break;
            };
            history.push((cost, matched_cost));
            iterations += 1;
            let improvement = (cost - matched_cost) / cost;
            transform = candidate;
            let (c, p) = self.evaluate(src, &transform, gate_sq);
            if p.is_empty() {
                return Err(LockitError::EmptyCorrespondences);
            }
            cost = c;
            pairs = p;
            if improvement < cfg.tolerance {
                converged = true;
                break;
            }
        }
        Ok(RegistrationResult {
            transform,
            final_cost: cost,
            inlier_count: pairs.len(),
            iterations,
            converged,
            iteration_costs: history,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cloud::estimate_normals;
    use crate::registration::{alignment_rms, transform_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Three walls, a floor patch and a few boxes.
    pub(crate) fn walls_scene(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let s = 0.25;
        for i in 0..80 {
            for k in 0..12 {
                let u = -10.0 + i as f64 * s;
                let z = k as f64 * s;
                pts.push([u, 8.0, z]);
                pts.push([12.0, u * 0.8, z]);
                pts.push([-9.0, u * 0.6 + 1.0, z]);
            }
        }
        for i in 0..40 {
            for j in 0..32 {
                pts.push([-9.0 + i as f64 * 0.5, -7.0 + j as f64 * 0.5, 0.0]);
            }
        }
        for _ in 0..6 {
            let (cx, cy) = (rng.random_range(-6.0..8.0), rng.random_range(-5.0..5.0));
            let (w, d, h) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.5));
            let nx = (w / s) as i32;
            let ny = (d / s) as i32;
            let nz = (h / s) as i32;
            for a in 0..=nx {
                for c in 0..=nz {
                    let x = cx + a as f64 * s;
                    let z = c as f64 * s;
                    pts.push([x, cy, z]);
                    pts.push([x, cy + d, z]);
                }
            }
            for b in 0..=ny {
                for c in 0..=nz {
                    let y = cy + b as f64 * s;
                    let z = c as f64 * s;
                    pts.push([cx, y, z]);
                    pts.push([cx + w, y, z]);
                }
            }
        }
        PointCloud::from_xyz(&pts)
    }

    #[test]
    fn self_alignment_is_identity() {
        let cloud = walls_scene(1);
        let target = estimate_normals(&cloud, 20).unwrap();
        let r = icp_point_to_plane(&cloud, &target, &RigidTransform3::identity(), &IcpConfig::default()).unwrap();
        assert!(r.final_cost < 1e-12);
        let (t, a) = transform_error(&r.transform, &RigidTransform3::identity());
        assert!(t < 1e-12 && a < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn recovers_small_offset() {
        let cloud = walls_scene(2);
        let target = estimate_normals(&cloud, 20).unwrap();
        // source = target moved by `motion`; registering source back needs its inverse
        let motion = RigidTransform3::from_planar(0.3, -0.1, 5f64.to_radians());
        let source = cloud.transformed(&motion);
        let r = icp_point_to_plane(&source, &target, &RigidTransform3::identity(), &IcpConfig::default()).unwrap();
        let (t, a) = transform_error(&r.transform, &motion.inverse());
        assert!(t < 0.05 && a < 0.5f64.to_radians(), "t={t} a={}", a.to_degrees());
        assert!(r.iteration_costs.iter().all(|(a, b)| b <= a));
        assert!(r.transform.is_valid(1e-9));
    }

    #[test]
    fn half_turn_seed_fails() {
        let cloud = walls_scene(3);
        let target = estimate_normals(&cloud, 20).unwrap();
        let motion = RigidTransform3::from_planar(0.3, -0.1, 5f64.to_radians());
        let source = cloud.transformed(&motion);
        let seed = RigidTransform3::from_planar(0.0, 0.0, std::f64::consts::PI);
        match icp_point_to_plane(&source, &target, &seed, &IcpConfig::default()) {
            Ok(r) => {
                let err = alignment_rms(&r.transform, &motion.inverse(), &source.points);
                assert!(!r.converged || err > 1.0, "err={err}");
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn single_plane_is_degenerate() {
        let pts: Vec<[f64; 3]> = (0..400).map(|i| [(i % 20) as f64 * 0.2, (i / 20) as f64 * 0.2, 0.0]).collect();
        let cloud = PointCloud::from_xyz(&pts);
        let target = estimate_normals(&cloud, 8).unwrap();
        assert!(matches!(
            icp_point_to_plane(&cloud, &target, &RigidTransform3::identity(), &IcpConfig::default()),
            Err(LockitError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn far_seed_has_no_correspondences() {
        let cloud = walls_scene(4);
        let target = estimate_normals(&cloud, 20).unwrap();
        let seed = RigidTransform3::from_planar(500.0, 0.0, 0.0);
        assert!(matches!(
            icp_point_to_plane(&cloud, &target, &seed, &IcpConfig::default()),
            Err(LockitError::EmptyCorrespondences)
        ));
    }
}
