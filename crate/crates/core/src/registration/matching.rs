use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Correspondence;
use crate::error::{LockitError, Result};
use crate::features::LocalFeatureCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Keep only pairs that are each other's nearest neighbor.
    pub mutual: bool,
    /// Best/second-best distance ratio bound; values ≥ 1 disable the test.
    pub ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            mutual: true,
            ratio: 1.0,
        }
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += (x - y) * (x - y);
    }
    s
}

#[derive(Clone, Copy)]
struct Best {
    index: usize,
    d: f32,
    second: f32,
}

impl Best {
    const NONE: Best = Best {
        index: usize::MAX,
        d: f32::INFINITY,
        second: f32::INFINITY,
    };

    fn offer(&mut self, index: usize, d: f32) {
        if d < self.d {
            self.second = self.d;
            self.d = d;
            self.index = index;
        } else if d < self.second {
            self.second = d;
        }
    }
}

const ROW_BLOCK: usize = 64;

/// Nearest-neighbor matches in feature space, sorted by feature distance (ties by index).
pub fn match_features(source: &LocalFeatureCloud, target: &LocalFeatureCloud, cfg: &MatchConfig) -> Result<Vec<Correspondence>> {
    if source.dim != target.dim {
        return Err(LockitError::DimensionMismatch {
            expected: source.dim,
            actual: target.dim,
        });
    }
    if source.is_empty() || target.is_empty() {
        return Err(LockitError::EmptyCloud);
    }
    let n = source.len();
    let m = target.len();
    // one pass over the distance matrix in row blocks: row bests plus per-block column bests
    let blocks: Vec<(Vec<Best>, Vec<(f32, usize)>)> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let rows = b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n);
            let mut cols = vec![(f32::INFINITY, usize::MAX); m];
            let mut row_best = Vec::with_capacity(rows.len());
            for i in rows {
                let fi = source.feature(i);
                let mut best = Best::NONE;
                for (j, col) in cols.iter_mut().enumerate() {
                    let d = squared_distance(fi, target.feature(j));
                    best.offer(j, d);
                    if d < col.0 {
                        *col = (d, i);
                    }
                }
                row_best.push(best);
            }
            (row_best, cols)
        })
        .collect();
    let mut col_best = vec![(f32::INFINITY, usize::MAX); m];
    let mut row_best = Vec::with_capacity(n);
    for (rows, cols) in blocks {
        row_best.extend(rows);
        for (acc, c) in col_best.iter_mut().zip(cols) {
            if c.0 < acc.0 {
                *acc = c;
            }
        }
    }
    let mut out: Vec<Correspondence> = row_best
        .iter()
        .enumerate()
        .filter(|(i, b)| !cfg.mutual || col_best[b.index].1 == *i)
        .filter(|(_, b)| cfg.ratio >= 1.0 || (b.second.is_finite() && (b.d as f64).sqrt() < cfg.ratio * (b.second as f64).sqrt()))
        .map(|(i, b)| Correspondence {
            source_index: i,
            target_index: b.index,
            feature_distance: (b.d as f64).sqrt(),
        })
        .collect();
    out.sort_by(|a, b| a.feature_distance.total_cmp(&b.feature_distance).then(a.source_index.cmp(&b.source_index)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> LocalFeatureCloud {
        let pts = (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let feats = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        LocalFeatureCloud::new(pts, dim, feats).unwrap()
    }

    fn brute_nn(a: &LocalFeatureCloud, i: usize, b: &LocalFeatureCloud) -> usize {
        (0..b.len())
            .min_by(|&x, &y| {
                let dx: f64 = a.feature(i).iter().zip(b.feature(x)).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
                let dy: f64 = a.feature(i).iter().zip(b.feature(y)).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
                dx.total_cmp(&dy).then(x.cmp(&y))
            })
            .unwrap()
    }

    #[test]
    fn identical_clouds_match_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_cloud(300, 19, &mut rng);
        let c = match_features(&f, &f, &MatchConfig::default()).unwrap();
        assert_eq!(c.len(), 300);
        assert!(c.iter().all(|k| k.source_index == k.target_index && k.feature_distance == 0.0));
    }

    #[test]
    fn matches_brute_force_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_cloud(150, 24, &mut rng);
        let b = random_cloud(170, 24, &mut rng);
        let plain = match_features(&a, &b, &MatchConfig { mutual: false, ratio: 1.0 }).unwrap();
        assert_eq!(plain.len(), 150);
        for c in &plain {
            assert_eq!(c.target_index, brute_nn(&a, c.source_index, &b));
        }
        assert!(plain.windows(2).all(|w| w[0].feature_distance <= w[1].feature_distance));
        let mutual = match_features(&a, &b, &MatchConfig::default()).unwrap();
        for c in &mutual {
            assert_eq!(brute_nn(&b, c.target_index, &a), c.source_index);
        }
        let strict = match_features(&a, &b, &MatchConfig { mutual: false, ratio: 0.8 }).unwrap();
        assert!(strict.len() < plain.len());
    }

    #[test]
    fn known_pairing_with_distractors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 32;
        let a = random_cloud(200, dim, &mut rng);
        // target: noisy copies of the first 140 source features plus 60 distractors
        let mut feats = Vec::new();
        for i in 0..140 {
            feats.extend(a.feature(i).iter().map(|v| v + rng.random_range(-0.05f32..0.05)));
        }
        feats.extend((0..60 * dim).map(|_| rng.random_range(-1.0f32..1.0)));
        let pts = (0..200).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let b = LocalFeatureCloud::new(pts, dim, feats).unwrap();
        let c = match_features(&a, &b, &MatchConfig::default()).unwrap();
        let correct = c.iter().filter(|k| k.source_index < 140 && k.target_index == k.source_index).count();
        assert!(correct as f64 >= 0.9 * c.len() as f64);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cloud(3, 4, &mut rng);
        let b = random_cloud(3, 5, &mut rng);
        assert!(matches!(match_features(&a, &b, &MatchConfig::default()), Err(LockitError::DimensionMismatch { .. })));
    }
}
