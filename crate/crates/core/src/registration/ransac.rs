use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{kabsch, Correspondence, RegistrationResult};
use crate::cloud::PointCloud;
use crate::error::{LockitError, Result};
use crate::geometry::RigidTransform3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub inlier_distance_m: f64,
    pub max_trials: usize,
    /// Stop once this probability of having drawn an all-inlier sample is reached.
    pub confidence: f64,
    /// Rounds of refitting on the current inlier set.
    pub refit_rounds: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_distance_m: 0.3,
            max_trials: 10_000,
            confidence: 0.999,
            refit_rounds: 3,
            seed: 0,
        }
    }
}

/// Trials are evaluated in fixed-size chunks so that early termination lands on
/// the same trial count whatever the thread count.
const CHUNK: usize = 128;
const MIN_SAMPLE_AREA: f64 = 1e-6;

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut z = seed ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn triangle_area(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

struct Pairs {
    src: Vec<Point3<f64>>,
    dst: Vec<Point3<f64>>,
}

impl Pairs {
    fn inliers(&self, t: &RigidTransform3, dist_sq: f64) -> (usize, f64) {
        let mut n = 0;
        let mut cost = 0.0;
        for (s, d) in self.src.iter().zip(&self.dst) {
            let e = (t.apply(s) - d).norm_squared();
            if e <= dist_sq {
                n += 1;
                cost += e;
            }
        }
        (n, cost)
    }

    fn inlier_indices(&self, t: &RigidTransform3, dist_sq: f64) -> Vec<usize> {
        (0..self.src.len())
            .filter(|&i| (t.apply(&self.src[i]) - self.dst[i]).norm_squared() <= dist_sq)
            .collect()
    }

    fn fit(&self, idx: &[usize]) -> RigidTransform3 {
        let s: Vec<Point3<f64>> = idx.iter().map(|&i| self.src[i]).collect();
        let d: Vec<Point3<f64>> = idx.iter().map(|&i| self.dst[i]).collect();
        kabsch(&s, &d)
    }
}

/// Required trial count for the given inlier fraction.
fn trials_needed(inlier_fraction: f64, confidence: f64) -> f64 {
    let p = inlier_fraction.powi(3);
    if p <= 0.0 {
        return f64::INFINITY;
    }
    if p >= 1.0 {
        return 1.0;
    }
    ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil()
}

/// Robust rigid fit over feature correspondences: three-point hypotheses,
/// inlier counting, then refits on the inlier set.
pub fn ransac_register(
    source: &PointCloud,
    target: &PointCloud,
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    if corrs.len() < 3 {
        return Err(LockitError::TooFewCorrespondences(corrs.len()));
    }
    if let Some(bad) = corrs
        .iter()
        .find(|c| c.source_index >= source.len() || c.target_index >= target.len())
    {
        return Err(LockitError::InvalidConfig(format!(
            "correspondence ({}, {}) out of range",
            bad.source_index, bad.target_index
        )));
    }
    let pairs = Pairs {
        src: corrs.iter().map(|c| source.points[c.source_index]).collect(),
        dst: corrs.iter().map(|c| target.points[c.target_index]).collect(),
    };
    let n = corrs.len();
    let dist_sq = cfg.inlier_distance_m * cfg.inlier_distance_m;

    // (inliers, cost, trial, model); ties go to the earlier trial
    let mut best: Option<(usize, f64, usize, RigidTransform3)> = None;
    let mut done = 0;
    while done < cfg.max_trials {
        let end = (done + CHUNK).min(cfg.max_trials);
        let chunk_best = (done..end)
            .into_par_iter()
            .filter_map(|trial| {
                let mut rng = trial_rng(cfg.seed, trial);
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                let mut c = rng.random_range(0..n - 2);
                for x in [a.min(b), a.max(b)] {
                    if c >= x {
                        c += 1;
                    }
                }
                let idx = [a, b, c];
                if triangle_area(&pairs.src[a], &pairs.src[b], &pairs.src[c]) < MIN_SAMPLE_AREA
                    || triangle_area(&pairs.dst[a], &pairs.dst[b], &pairs.dst[c]) < MIN_SAMPLE_AREA
                {
                    return None;
                }
                let model = pairs.fit(&idx);
                let (k, cost) = pairs.inliers(&model, dist_sq);
                Some((k, cost, trial, model))
            })
            .reduce_with(|x, y| if better(&y, &x) { y } else { x });
        if let Some(cb) = chunk_best {
            if best.as_ref().is_none_or(|b| better(&cb, b)) {
                best = Some(cb);
            }
        }
        done = end;
        if let Some(b) = &best {
            if done as f64 >= trials_needed(b.0 as f64 / n as f64, cfg.confidence) {
                break;
            }
        }
    }
    let Some((sampled_inliers, sampled_cost, _, sampled)) = best else {
        return Err(LockitError::NoConsensus(0));
    };
    if sampled_inliers < 3 {
        return Err(LockitError::NoConsensus(sampled_inliers));
    }

    let (mut model, mut inliers, mut cost) = (sampled, sampled_inliers, sampled_cost);
    for _ in 0..cfg.refit_rounds {
        let idx = pairs.inlier_indices(&model, dist_sq);
        let refit = pairs.fit(&idx);
        let (k, c) = pairs.inliers(&refit, dist_sq);
        if k < inliers || (k == inliers && c >= cost) {
            break;
        }
        model = refit;
        inliers = k;
        cost = c;
    }
    Ok(RegistrationResult {
        transform: model.orthonormalized(),
        final_cost: cost,
        inlier_count: inliers,
        iterations: done,
        converged: true,
        iteration_costs: Vec::new(),
    })
}

/// More inliers wins, then lower cost, then the earlier trial.
fn better(a: &(usize, f64, usize, RigidTransform3), b: &(usize, f64, usize, RigidTransform3)) -> bool {
    (a.0, std::cmp::Reverse(ordered(a.1)), std::cmp::Reverse(a.2)) > (b.0, std::cmp::Reverse(ordered(b.1)), std::cmp::Reverse(b.2))
}

fn ordered(v: f64) -> u64 {
    // costs are non-negative, so the bit pattern orders like the value
    v.to_bits()
}
