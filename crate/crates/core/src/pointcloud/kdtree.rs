use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::scalar::Real;

#[inline]
pub(crate) fn dist2<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Static 3-d tree over a point slice. Nodes live implicitly in a permuted
/// index array: the median of `perm[lo..hi]` is the node, the halves are its
/// subtrees.
///
/// Ties in distance resolve to the lowest point index, matching a linear scan.
#[derive(Clone, Debug)]
pub struct KdTree<T: Real> {
    points: Vec<Vector3<T>>,
    perm: Vec<usize>,
    axis: Vec<u8>,
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Vector3<T>]) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build_range(points, &mut perm, &mut axis, 0, points.len());
        Self {
            points: points.to_vec(),
            perm,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vector3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::max_value().expect("bounded scalar"));
        self.nearest_in(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn nearest_in(&self, q: &Vector3<T>, lo: usize, hi: usize, best: &mut (usize, T)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.perm[mid];
        let p = &self.points[idx];
        let d = dist2(q, p);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_in(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    /// The `k` nearest points as `(index, squared distance)`, closest first.
    pub fn knn(&self, q: &Vector3<T>, k: usize) -> Vec<(usize, T)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_in(q, k, 0, self.points.len(), &mut heap);
        let mut out: Vec<(usize, T)> = heap.into_iter().map(|c: Cand<T>| (c.idx, c.d)).collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_in(&self, q: &Vector3<T>, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Cand<T>>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.perm[mid];
        let p = &self.points[idx];
        let c = Cand { d: dist2(q, p), idx };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("non-empty") {
            heap.pop();
            heap.push(c);
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_in(q, k, near.0, near.1, heap);
        if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d {
            self.knn_in(q, k, far.0, far.1, heap);
        }
    }
}

fn build_range<T: Real>(points: &[Vector3<T>], perm: &mut [usize], axis: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    // split on the axis of largest spread
    let mut min = points[perm[lo]];
    let mut max = min;
    for &i in &perm[lo..hi] {
        min = min.inf(&points[i]);
        max = max.sup(&points[i]);
    }
    let ext = max - min;
    let ax = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = lo + (hi - lo) / 2;
    perm[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
        points[a][ax].partial_cmp(&points[b][ax]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    axis[mid] = ax as u8;
    build_range(points, perm, axis, lo, mid);
    build_range(points, perm, axis, mid + 1, hi);
}

#[derive(Clone, Copy, Debug)]
struct Cand<T> {
    d: T,
    idx: usize,
}

impl<T: PartialOrd> PartialEq for Cand<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: PartialOrd> Eq for Cand<T> {}

impl<T: PartialOrd> PartialOrd for Cand<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: PartialOrd> Ord for Cand<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d
            .partial_cmp(&other.d)
            .unwrap_or(Ordering::Equal)
            .then(self.idx.cmp(&other.idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn nearest_agrees_with_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = rng.gen_range(1..=500);
            // coarse integer grid forces plenty of exact ties
            let coarse = trial % 3 == 0;
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    if coarse {
                        Vector3::new(rng.gen_range(0..5) as f64, rng.gen_range(0..5) as f64, rng.gen_range(0..3) as f64)
                    } else {
                        Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-20.0..20.0), rng.gen_range(0.0..5.0))
                    }
                })
                .collect();
            let tree = KdTree::build(&pts);
            for _ in 0..5 {
                let q = Vector3::new(rng.gen_range(-60.0..60.0), rng.gen_range(-25.0..25.0), rng.gen_range(-2.0..7.0));
                let q = if coarse { q.map(f64::round) } else { q };
                assert_eq!(tree.nearest(&q).unwrap(), brute_nearest(&pts, &q));
            }
        }
    }

    #[test]
    fn knn_agrees_with_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let tree = KdTree::build(&pts);
        for k in [1, 5, 20, 300, 400] {
            let q = Vector3::new(5.0, 5.0, 5.0);
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(&q, p))).collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            assert_eq!(tree.knn(&q, k), all);
        }
    }
}
