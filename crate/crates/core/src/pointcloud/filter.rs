use std::collections::HashMap;

use nalgebra::Vector3;

use super::{dist2, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T: Real> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn contains(&self, p: &Vector3<T>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Workspace crop, instrument exclusion, statistical outlier removal and
/// voxel-grid decimation, applied in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig<T: Real> {
    pub crop_box: Aabb<T>,
    /// `(centre, radius)` spheres whose interiors are discarded.
    pub exclusion_spheres: Vec<(Vector3<T>, T)>,
    pub outlier_k: usize,
    pub outlier_stddev: T,
    /// Points per mm² after decimation.
    pub target_density: T,
}

impl<T: Real> FilterConfig<T> {
    pub fn new(crop_box: Aabb<T>, target_density: T) -> Self {
        Self {
            crop_box,
            exclusion_spheres: Vec::new(),
            outlier_k: 20,
            outlier_stddev: T::one(),
            target_density,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| !(self.crop_box.max[a] > self.crop_box.min[a])) {
            return Err(Error::Config("crop box is empty".into()));
        }
        if self.outlier_k < 1 {
            return Err(Error::Config("outlier_k must be at least 1".into()));
        }
        if !(self.target_density > T::zero()) {
            return Err(Error::Config("target density must be positive".into()));
        }
        Ok(())
    }
}

pub fn filter<T: Real>(cloud: &PointCloud<T>, cfg: &FilterConfig<T>) -> Result<PointCloud<T>> {
    cfg.validate()?;
    let kept: Vec<Vector3<T>> = cloud
        .points()
        .iter()
        .filter(|p| cfg.crop_box.contains(p))
        .filter(|p| cfg.exclusion_spheres.iter().all(|(c, r)| dist2(p, c) > *r * *r))
        .copied()
        .collect();
    let kept = remove_statistical_outliers(kept, cfg.outlier_k, cfg.outlier_stddev);
    let kept = voxel_decimate(kept, T::one() / cfg.target_density.sqrt());
    if kept.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(PointCloud::new_unchecked(kept))
}

/// Drop points whose mean distance to their `k` nearest neighbours exceeds
/// the population mean by more than `stddev_mul` standard deviations.
fn remove_statistical_outliers<T: Real>(points: Vec<Vector3<T>>, k: usize, stddev_mul: T) -> Vec<Vector3<T>> {
    if points.len() < 2 {
        return points;
    }
    let k = k.min(points.len() - 1);
    let tree = super::KdTree::build(&points);
    let mean_d: Vec<T> = points
        .iter()
        .map(|p| {
            // first hit is the point itself
            let nn = tree.knn(p, k + 1);
            let s = nn.iter().skip(1).fold(T::zero(), |acc, &(_, d2)| acc + d2.sqrt());
            s / T::from_usize_lossy(k)
        })
        .collect();
    let n = T::from_usize_lossy(points.len());
    let mu = mean_d.iter().fold(T::zero(), |a, &d| a + d) / n;
    let var = mean_d.iter().fold(T::zero(), |a, &d| a + (d - mu) * (d - mu)) / n;
    let limit = mu + stddev_mul * var.sqrt();
    points.into_iter().zip(mean_d).filter(|(_, d)| *d <= limit).map(|(p, _)| p).collect()
}

/// Keep, per occupied voxel of edge `h`, the point closest to the voxel's
/// centroid. A surface sampled this way holds about one point per `h²`.
fn voxel_decimate<T: Real>(points: Vec<Vector3<T>>, h: T) -> Vec<Vector3<T>> {
    let key = |p: &Vector3<T>| p.map(|c| (c / h).floor().as_f64() as i64);
    let mut order: Vec<[i64; 3]> = Vec::new();
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let k = [k.x, k.y, k.z];
        cells
            .entry(k)
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(i);
    }
    order
        .iter()
        .map(|k| {
            let members = &cells[k];
            let c = members.iter().fold(Vector3::zeros(), |a, &i| a + points[i]) / T::from_usize_lossy(members.len());
            let best = members
                .iter()
                .copied()
                .min_by(|&a, &b| dist2(&points[a], &c).partial_cmp(&dist2(&points[b], &c)).unwrap().then(a.cmp(&b)))
                .expect("non-empty cell");
            points[best]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn big_box() -> Aabb<f64> {
        Aabb {
            min: Vector3::repeat(-1000.0),
            max: Vector3::repeat(1000.0),
        }
    }

    #[test]
    fn far_point_is_an_outlier() {
        let mut pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new((i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1, 0.0)).collect();
        pts.push(Vector3::new(100.0, 0.0, 0.0));
        let mut cfg = FilterConfig::new(big_box(), 1e6);
        cfg.outlier_stddev = 1.0;
        let out = filter(&PointCloud::new(pts.clone()).unwrap(), &cfg).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.points().iter().all(|p| p.x < 1.0));
    }

    #[test]
    fn crop_and_exclusion() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0), Vector3::new(50.0, 0.0, 0.0), Vector3::new(0.0, 5.0, 0.0)];
        let mut cfg = FilterConfig::new(
            Aabb {
                min: Vector3::new(-1.0, -1.0, -1.0),
                max: Vector3::new(10.0, 10.0, 1.0),
            },
            1e6,
        );
        cfg.exclusion_spheres.push((Vector3::new(5.0, 0.0, 0.0), 1.0));
        cfg.outlier_stddev = 1e9;
        let out = filter(&PointCloud::new(pts).unwrap(), &cfg).unwrap();
        assert_eq!(out.points(), &[Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 5.0, 0.0)]);
    }

    #[test]
    fn everything_removed_is_an_error() {
        let cfg = FilterConfig::new(
            Aabb {
                min: Vector3::repeat(10.0),
                max: Vector3::repeat(11.0),
            },
            1.0,
        );
        let c = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        assert!(matches!(filter(&c, &cfg), Err(Error::EmptyResult)));
    }

    #[test]
    fn decimation_approaches_target_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 40 x 20 mm plane at ~25 pts/mm^2, decimate to 4 pts/mm^2
        let pts: Vec<Vector3<f64>> = (0..20_000).map(|_| Vector3::new(rng.gen_range(0.0..40.0), rng.gen_range(0.0..20.0), 0.25)).collect();
        let mut cfg = FilterConfig::new(big_box(), 4.0);
        cfg.outlier_stddev = 1e9;
        let out = filter(&PointCloud::new(pts).unwrap(), &cfg).unwrap();
        let density = out.len() as f64 / 800.0;
        assert!((density - 4.0).abs() < 0.4, "density {density}");
    }

    #[test]
    fn sparse_cloud_unchanged() {
        let pts: Vec<Vector3<f64>> = (0..6).flat_map(|i| (0..4).map(move |j| Vector3::new(i as f64 * 3.0, j as f64 * 3.0, 0.1))).collect();
        let mut cfg = FilterConfig::new(big_box(), 1.0);
        cfg.outlier_stddev = 3.0;
        let out = filter(&PointCloud::new(pts.clone()).unwrap(), &cfg).unwrap();
        assert_eq!(out.points(), pts.as_slice());
    }
}
