//! Observation point clouds: nearest-neighbour indexing, the cleaning chain
//! applied to raw depth frames, and the one-directional distance metrics.

mod filter;
mod io;
mod kdtree;

use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use filter::{filter, Aabb, FilterConfig};
pub use io::{read_cloud, read_cloud_sequence, write_cloud, write_cloud_sequence};
pub use kdtree::KdTree;
pub(crate) use kdtree::dist2;

/// Unordered 3-D points with a lazily built spatial index.
#[derive(Clone, Debug)]
pub struct PointCloud<T: Real> {
    points: Vec<Vector3<T>>,
    index: OnceLock<KdTree<T>>,
}

impl<T: Real> PointCloud<T> {
    /// Build a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Vector3<T>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Argument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self::new_unchecked(points))
    }

    pub(crate) fn new_unchecked(points: Vec<Vector3<T>>) -> Self {
        Self {
            points,
            index: OnceLock::new(),
        }
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vector3<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self) -> &KdTree<T> {
        self.index.get_or_init(|| KdTree::build(&self.points))
    }

    /// Nearest point index and Euclidean distance.
    pub fn nearest(&self, q: &Vector3<T>) -> Option<(usize, T)> {
        self.index().nearest(q).map(|(i, d2)| (i, d2.sqrt()))
    }

    pub fn map(&self, f: impl Fn(&Vector3<T>) -> Vector3<T>) -> Self {
        Self::new_unchecked(self.points.iter().map(f).collect())
    }
}

impl<T: Real> PartialEq for PointCloud<T> {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

fn require_non_empty<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("distance metrics need two non-empty clouds".into()));
    }
    Ok(())
}

/// For every observed point, the index of and distance to its nearest
/// reference point.
pub fn nearest_distances<T: Real>(observed: &PointCloud<T>, reference: &PointCloud<T>) -> Result<Vec<(usize, T)>> {
    require_non_empty(observed, reference)?;
    let tree = reference.index();
    Ok(observed
        .points()
        .iter()
        .map(|q| {
            let (i, d2) = tree.nearest(q).expect("non-empty");
            (i, d2.sqrt())
        })
        .collect())
}

/// Mean distance from each observed point to its nearest reference point.
/// Deliberately asymmetric: only the observed side is averaged.
pub fn chamfer_one_directional<T: Real>(observed: &PointCloud<T>, reference: &PointCloud<T>) -> Result<T> {
    let d = nearest_distances(observed, reference)?;
    let sum = d.iter().fold(T::zero(), |acc, &(_, x)| acc + x);
    Ok(sum / T::from_usize_lossy(d.len()))
}

/// Largest observed-to-reference nearest distance (same direction as
/// [`chamfer_one_directional`]).
pub fn hausdorff<T: Real>(observed: &PointCloud<T>, reference: &PointCloud<T>) -> Result<T> {
    let d = nearest_distances(observed, reference)?;
    Ok(d.iter().fold(T::zero(), |acc, &(_, x)| acc.max(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(p.iter().map(|a| Vector3::from(*a)).collect()).unwrap()
    }

    #[test]
    fn metric_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 0.0]]);
        assert_eq!(chamfer_one_directional(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_one_directional(&a, &b).unwrap(), 0.5);
        assert_eq!(chamfer_one_directional(&b, &a).unwrap(), 0.0);
        let c = cloud(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(hausdorff(&c, &b).unwrap(), 3.0);
        assert_eq!(hausdorff(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn outlier_moves_hausdorff_more_than_chamfer() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let reference = cloud(&pts);
        let mut noisy = pts.clone();
        noisy.iter_mut().for_each(|p| p[1] = 0.2);
        let base = cloud(&noisy);
        noisy.push([4.0, 50.0, 0.0]);
        let with_outlier = cloud(&noisy);
        let dc = chamfer_one_directional(&with_outlier, &reference).unwrap() - chamfer_one_directional(&base, &reference).unwrap();
        let dh = hausdorff(&with_outlier, &reference).unwrap() - hausdorff(&base, &reference).unwrap();
        assert!(dh > 49.0);
        assert!(dc <= 50.0 / 11.0);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let empty = PointCloud::<f64>::new(vec![]).unwrap();
        assert!(matches!(chamfer_one_directional(&a, &empty), Err(Error::Argument(_))));
        assert!(matches!(hausdorff(&empty, &a), Err(Error::Argument(_))));
        assert!(PointCloud::new(vec![Vector3::new(0.0, f64::NAN, 0.0)]).is_err());
    }
}
