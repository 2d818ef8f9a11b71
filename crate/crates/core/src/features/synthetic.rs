//! Classical stand-ins for the learned descriptors.
//!
//! The global signature only uses horizontal range, height and per-shell
//! azimuth occupancy, so it is invariant to yaw about the sensor. The local
//! feature only uses distances, normal projections and normal agreement inside
//! a ball, so it is invariant to any rigid motion of the whole cloud.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::{GlobalDescriptor, LocalFeatureCloud, NETWORK_GLOBAL_DIM, NETWORK_LOCAL_DIM};
use crate::cloud::PointCloud;
use crate::error::{LockitError, Result};
use crate::kdtree::KdTree;

const RHO_BINS: usize = 64;
const Z_BINS: usize = 32;
const JOINT_RHO: usize = 16;
const JOINT_Z: usize = 8;
const SHELLS: usize = 32;
const SECTORS: usize = 72;
const RUN_SHELLS: usize = 16;
// height window in normalized units (about -3 m .. +6 m at scale 50)
const Z_LO: f64 = -0.06;
const Z_HI: f64 = 0.12;

/// Adds `weight` to a histogram with linear interpolation between bin centers.
fn soft_bin(hist: &mut [f64], value: f64, lo: f64, hi: f64, weight: f64) {
    let n = hist.len();
    let u = ((value - lo) / (hi - lo) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let f = u - i0 as f64;
    hist[i0] += weight * (1.0 - f);
    if i0 + 1 < n {
        hist[i0 + 1] += weight * f;
    }
}

fn normalize_block(block: &mut [f64], weight: f64) {
    let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        block.iter_mut().for_each(|v| *v *= weight / n);
    }
}

/// Rotation-invariant global signature of a normalized cloud, unit L2 norm,
/// zero-padded to 512 entries.
pub fn synthetic_global(cloud: &PointCloud) -> Result<GlobalDescriptor> {
    if cloud.is_empty() {
        return Err(LockitError::EmptyCloud);
    }
    let mut rho_h = vec![0.0; RHO_BINS];
    let mut z_h = vec![0.0; Z_BINS];
    let mut joint = vec![0.0; JOINT_RHO * JOINT_Z];
    let mut occupied = vec![[false; SECTORS]; SHELLS];
    let mut run_occ = vec![[false; SECTORS]; RUN_SHELLS];

    for p in &cloud.points {
        let rho = p.x.hypot(p.y).min(1.0);
        soft_bin(&mut rho_h, rho, 0.0, 1.0, 1.0);
        soft_bin(&mut z_h, p.z, Z_LO, Z_HI, 1.0);

        let mut row = vec![0.0; JOINT_Z];
        soft_bin(&mut row, p.z, Z_LO, Z_HI, 1.0);
        let mut col = vec![0.0; JOINT_RHO];
        soft_bin(&mut col, rho, 0.0, 1.0, 1.0);
        for (i, c) in col.iter().enumerate().filter(|(_, c)| **c > 0.0) {
            for (j, r) in row.iter().enumerate().filter(|(_, r)| **r > 0.0) {
                joint[i * JOINT_Z + j] += c * r;
            }
        }

        let az = p.y.atan2(p.x) + std::f64::consts::PI;
        let sector = ((az / (2.0 * std::f64::consts::PI) * SECTORS as f64) as usize).min(SECTORS - 1);
        let shell = ((rho * SHELLS as f64) as usize).min(SHELLS - 1);
        occupied[shell][sector] = true;
        let rshell = ((rho * RUN_SHELLS as f64) as usize).min(RUN_SHELLS - 1);
        run_occ[rshell][sector] = true;
    }

    let mut occ: Vec<f64> = occupied
        .iter()
        .map(|s| s.iter().filter(|b| **b).count() as f64 / SECTORS as f64)
        .collect();
    let mut runs: Vec<f64> = run_occ
        .iter()
        .map(|s| {
            // number of occupied arcs on the circle
            let starts = (0..SECTORS).filter(|&k| s[k] && !s[(k + SECTORS - 1) % SECTORS]).count();
            let all = s.iter().all(|b| *b);
            (if all { 1 } else { starts }) as f64 / (SECTORS / 2) as f64
        })
        .collect();

    normalize_block(&mut rho_h, 1.0);
    normalize_block(&mut z_h, 1.0);
    normalize_block(&mut joint, 1.0);
    normalize_block(&mut occ, 1.0);
    normalize_block(&mut runs, 0.5);

    let mut values: Vec<f64> = Vec::with_capacity(NETWORK_GLOBAL_DIM);
    for block in [&rho_h, &z_h, &joint, &occ, &runs] {
        values.extend_from_slice(block);
    }
    values.resize(NETWORK_GLOBAL_DIM, 0.0);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LockitError::EmptyCloud);
    }
    Ok(GlobalDescriptor::new(values.iter().map(|v| (v / norm) as f32).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLocalConfig {
    /// Ball radii (meters) of the two description scales.
    pub radii: [f64; 2],
    /// Ball radius (meters) for the per-point normal.
    pub normal_radius: f64,
}

impl Default for SyntheticLocalConfig {
    fn default() -> Self {
        SyntheticLocalConfig {
            radii: [1.0, 2.5],
            normal_radius: 1.0,
        }
    }
}

const DIST_BINS: usize = 5;
const HEIGHT_BINS: usize = 3;
const AGREE_BINS: usize = 6;
const HIST_LEN: usize = DIST_BINS * HEIGHT_BINS * AGREE_BINS;
const SCALE_LEN: usize = 3 + HIST_LEN + 3;
const W_SHAPE: f64 = 0.3;
const W_MEANS: f64 = 0.3;

/// Eigenvalues sorted descending.
fn sorted_eigen(cov: &Matrix3<f64>) -> ([f64; 3], Vector3<f64>) {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = [
        eig.eigenvalues[idx[0]].max(0.0),
        eig.eigenvalues[idx[1]].max(0.0),
        eig.eigenvalues[idx[2]].max(0.0),
    ];
    let smallest: Vector3<f64> = eig.eigenvectors.column(idx[2]).into_owned();
    (vals, smallest)
}

fn interp(value: f64, n: usize) -> [(usize, f64); 2] {
    let u = (value * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = u.floor() as usize;
    let f = u - i0 as f64;
    [(i0, 1.0 - f), ((i0 + 1).min(n - 1), if i0 + 1 < n { f } else { 0.0 })]
}

/// Per-point rigid-invariant feature of dimension 192.
pub fn synthetic_local(cloud: &PointCloud, cfg: &SyntheticLocalConfig) -> Result<LocalFeatureCloud> {
    if cloud.is_empty() {
        return Err(LockitError::EmptyCloud);
    }
    let pts = cloud.as_arrays();
    let tree = KdTree::new(pts.clone());
    let vec3 = |i: usize| Vector3::new(pts[i][0], pts[i][1], pts[i][2]);

    let normals: Vec<Vector3<f64>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let nn = tree.within_radius(&pts[i], cfg.normal_radius);
            if nn.len() < 3 {
                return Vector3::zeros();
            }
            let c = nn.iter().fold(Vector3::zeros(), |a, &(j, _)| a + vec3(j)) / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(j, _) in &nn {
                let d = vec3(j) - c;
                cov += d * d.transpose();
            }
            let (vals, n) = sorted_eigen(&cov);
            if vals[0] <= 0.0 {
                Vector3::zeros()
            } else {
                n.normalize()
            }
        })
        .collect();

    let features: Vec<f32> = (0..pts.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = vec3(i);
            let np = normals[i];
            let mut out = Vec::with_capacity(NETWORK_LOCAL_DIM);
            for &radius in &cfg.radii {
                let mut hist = [0.0f64; HIST_LEN];
                let mut total = 0.0;
                let mut means = [0.0f64; 3];
                let mut cov = Matrix3::zeros();
                for (j, d2) in tree.within_radius(&pts[i], radius) {
                    let r = d2.sqrt();
                    if j == i || r < 1e-12 {
                        continue;
                    }
                    let w = 1.0 - r / radius;
                    if w <= 0.0 {
                        continue;
                    }
                    let d = vec3(j) - p;
                    let height = (np.dot(&d) / r).abs().min(1.0);
                    let agree = np.dot(&normals[j]).abs().min(1.0);
                    let dist = r / radius;
                    for (a, wa) in interp(dist, DIST_BINS) {
                        for (b, wb) in interp(height, HEIGHT_BINS) {
                            for (c, wc) in interp(agree, AGREE_BINS) {
                                hist[(a * HEIGHT_BINS + b) * AGREE_BINS + c] += w * wa * wb * wc;
                            }
                        }
                    }
                    means[0] += w * dist;
                    means[1] += w * height;
                    means[2] += w * agree;
                    cov += w * d * d.transpose();
                    total += w;
                }
                let mut shape = [0.0f64; 3];
                if total > 0.0 {
                    hist.iter_mut().for_each(|v| *v /= total);
                    means.iter_mut().for_each(|v| *v /= total);
                    let (l, _) = sorted_eigen(&(cov / total));
                    if l[0] > 0.0 {
                        shape = [(l[0] - l[1]) / l[0], (l[1] - l[2]) / l[0], l[2] / l[0]];
                    }
                }
                out.extend(shape.iter().map(|v| (v * W_SHAPE) as f32));
                out.extend(hist.iter().map(|v| *v as f32));
                out.extend(means.iter().map(|v| (v * W_MEANS) as f32));
            }
            out
        })
        .collect();

    debug_assert_eq!(SCALE_LEN * 2, NETWORK_LOCAL_DIM);
    LocalFeatureCloud::new(cloud.points.clone(), NETWORK_LOCAL_DIM, features)
}
