//! Static k-d tree over fixed-dimension points.
//!
//! Distances are squared Euclidean. Ties are broken by the lower point index so
//! results match a linear scan exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for k in 0..D {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: Vec<[f64; D]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0);
        KdTree { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, query: &[f64; D]) -> Option<(usize, f64)> {
        let mut best = Candidate {
            dist: f64::INFINITY,
            index: usize::MAX,
        };
        self.nearest_rec(query, 0, self.order.len(), 0, &mut best);
        (best.index != usize::MAX).then_some((best.index, best.dist))
    }

    fn nearest_rec(&self, q: &[f64; D], lo: usize, hi: usize, depth: usize, best: &mut Candidate) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = Candidate {
            dist: sq_dist(q, p),
            index: idx,
        };
        if cand < *best {
            *best = cand;
        }
        let axis = depth % D;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, first.0, first.1, depth + 1, best);
        if diff * diff <= best.dist {
            self.nearest_rec(q, second.0, second.1, depth + 1, best);
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(query, k, 0, self.order.len(), 0, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist)).collect()
    }

    fn knn_rec(
        &self,
        q: &[f64; D],
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = Candidate {
            dist: sq_dist(q, p),
            index: idx,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let axis = depth % D;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, k, first.0, first.1, depth + 1, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().unwrap().dist
        };
        if diff * diff <= worst {
            self.knn_rec(q, k, second.0, second.1, depth + 1, heap);
        }
    }

    /// All points with squared distance `<= radius²`, sorted by index.
    pub fn within_radius(&self, query: &[f64; D], radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.radius_rec(query, radius * radius, 0, self.order.len(), 0, &mut out);
        out.sort_by_key(|&(i, _)| i);
        out
    }

    fn radius_rec(
        &self,
        q: &[f64; D],
        r2: f64,
        lo: usize,
        hi: usize,
        depth: usize,
        out: &mut Vec<(usize, f64)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d = sq_dist(q, p);
        if d <= r2 {
            out.push((idx, d));
        }
        let axis = depth % D;
        let diff = q[axis] - p[axis];
        if diff <= 0.0 || diff * diff <= r2 {
            self.radius_rec(q, r2, lo, mid, depth + 1, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.radius_rec(q, r2, mid + 1, hi, depth + 1, out);
        }
    }
}

fn build<const D: usize>(points: &[[f64; D]], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % D;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then(a.cmp(&b))
    });
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}
