//! Rigid frame registration: least-squares fits from explicit
//! correspondences and point-to-point ICP from a seeded pose.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{io_err, parse_err, Error, Result};
use crate::pointcloud::PointCloud;
use crate::scalar::Real;

/// `x ↦ R·x + t` with `R` a proper rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by `t`.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, t: Vector3<T>) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *r.matrix(),
            translation: t,
        }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn apply_cloud(&self, c: &PointCloud<T>) -> PointCloud<T> {
        c.map(|p| self.apply(p))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Orthonormality defect `‖RᵀR − I‖∞` (max-abs entry).
    pub fn orthonormality_error(&self) -> T {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_proper(&self, tol: T) -> bool {
        self.orthonormality_error() < tol && self.rotation.determinant() > T::zero()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> T {
        let c = (self.rotation.trace() - T::one()) / T::lit(2.0);
        c.max(-T::one()).min(T::one()).acos()
    }

    /// Write as 12 numbers, row-major `R | t`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for r in 0..3 {
            let row = [self.rotation[(r, 0)], self.rotation[(r, 1)], self.rotation[(r, 2)], self.translation[r]];
            let line: Vec<String> = row.iter().map(|v| format!("{:.17e}", v.as_f64())).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        std::fs::write(path, s).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let v: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, "transform values must be numbers"))?;
        if v.len() != 12 {
            return Err(parse_err(path, format!("expected 12 numbers, found {}", v.len())));
        }
        let t = Self {
            rotation: Matrix3::from_fn(|r, c| T::lit(v[r * 4 + c])),
            translation: Vector3::new(T::lit(v[3]), T::lit(v[7]), T::lit(v[11])),
        };
        if !t.is_proper(T::lit(1e-6)) {
            return Err(parse_err(path, "rotation block is not a proper rotation"));
        }
        Ok(t)
    }
}

fn centroid<T: Real>(p: &[Vector3<T>]) -> Vector3<T> {
    p.iter().fold(Vector3::zeros(), |a, x| a + x) / T::from_usize_lossy(p.len())
}

/// Least-squares rigid transform taking `source[i]` onto `target[i]`
/// (orthogonal Procrustes via SVD, with reflection correction).
pub fn fit_rigid<T: Real>(source: &[Vector3<T>], target: &[Vector3<T>]) -> Result<RigidTransform<T>> {
    if source.len() != target.len() {
        return Err(Error::Argument(format!(
            "{} source points but {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Rank(format!("need at least 3 correspondences, got {}", source.len())));
    }
    let cs = centroid(source);
    let ct = centroid(target);

    let mut spread = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = s - cs;
        spread += ds * ds.transpose();
        h += ds * (t - ct).transpose();
    }
    let ev = spread.symmetric_eigenvalues();
    let mut e = [ev[0], ev[1], ev[2]];
    e.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let (mid, hi) = (e[1], e[2]);
    if !(hi > T::zero()) || mid <= hi * T::lit(1e-12) {
        return Err(Error::Rank("source points are collinear or coincident".into()));
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Rank("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Rank("SVD failed".into()))?;
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < T::zero() {
        // flip the axis with the smallest singular value
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, T::max_value().expect("bounded")), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
        let mut d = Matrix3::identity();
        d[(k, k)] = -T::one();
        r = v * d * u.transpose();
    }
    Ok(RigidTransform {
        rotation: r,
        translation: ct - r * cs,
    })
}

#[derive(Clone, Debug)]
pub struct IcpConfig<T: Real> {
    pub max_iterations: usize,
    /// Stop once the residual changes by less than this (mm).
    pub convergence_tol: T,
    pub max_correspondence_dist: T,
    pub initial: RigidTransform<T>,
}

impl<T: Real> IcpConfig<T> {
    pub fn new(initial: RigidTransform<T>) -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: T::lit(1e-6),
            max_correspondence_dist: T::lit(10.0),
            initial,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.convergence_tol > T::zero()) || !(self.max_correspondence_dist > T::zero()) {
            return Err(Error::Config("ICP iterations and tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult<T: Real> {
    pub transform: RigidTransform<T>,
    /// Root-mean-square correspondence distance after the final update.
    pub mean_residual: T,
    pub iterations: usize,
    /// Residual after each iteration.
    pub history: Vec<T>,
}

/// Matches under `tf`; returns `(source idx, target idx, squared distance)`.
fn correspondences<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    tf: &RigidTransform<T>,
    max_d2: T,
) -> Vec<(usize, usize, T)> {
    let tree = target.index();
    source
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d2) = tree.nearest(&tf.apply(p))?;
            (d2 <= max_d2).then_some((i, j, d2))
        })
        .collect()
}

fn rms<T: Real>(pairs: &[(usize, usize, T)]) -> T {
    let s = pairs.iter().fold(T::zero(), |a, p| a + p.2);
    (s / T::from_usize_lossy(pairs.len())).sqrt()
}

/// Align `source` onto `target`, starting from `cfg.initial`. The returned
/// transform maps source coordinates into the target frame.
pub fn icp_register<T: Real>(source: &PointCloud<T>, target: &PointCloud<T>, cfg: &IcpConfig<T>) -> Result<IcpResult<T>> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Argument("ICP needs two non-empty clouds".into()));
    }
    let max_d2 = cfg.max_correspondence_dist * cfg.max_correspondence_dist;
    let mut tf = cfg.initial;
    let mut pairs = correspondences(source, target, &tf, max_d2);
    if pairs.is_empty() {
        return Err(Error::Registration("no correspondences within range of the initial pose".into()));
    }
    let mut residual = rms(&pairs);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let src: Vec<Vector3<T>> = pairs.iter().map(|p| source.points()[p.0]).collect();
        let dst: Vec<Vector3<T>> = pairs.iter().map(|p| target.points()[p.1]).collect();
        let candidate = fit_rigid(&src, &dst).map_err(|e| Error::Registration(format!("fit failed: {e}")))?;
        let next = correspondences(source, target, &candidate, max_d2);
        if next.is_empty() {
            return Err(Error::Registration(format!("lost every correspondence at iteration {iterations}")));
        }
        let next_residual = rms(&next);
        tf = candidate;
        pairs = next;
        let change = (residual - next_residual).abs();
        residual = next_residual;
        history.push(residual);
        if change < cfg.convergence_tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: tf,
        mean_residual: residual,
        iterations,
        history,
    })
}

/// Read `sx,sy,sz,tx,ty,tz` correspondences.
pub fn read_correspondences<T: Real>(path: &Path) -> Result<(Vec<Vector3<T>>, Vec<Vector3<T>>)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if header != ["sx", "sy", "sz", "tx", "ty", "tz"] {
        return Err(parse_err(path, "expected header sx,sy,sz,tx,ty,tz"));
    }
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("row {}: `{line}`", n + 1)))?;
        if v.len() != 6 {
            return Err(parse_err(path, format!("row {} has {} columns", n + 1, v.len())));
        }
        s.push(Vector3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])));
        t.push(Vector3::new(T::lit(v[3]), T::lit(v[4]), T::lit(v[5])));
    }
    Ok((s, t))
}

pub fn write_correspondences<T: Real>(path: &Path, source: &[Vector3<T>], target: &[Vector3<T>]) -> Result<()> {
    let mut s = String::from("sx,sy,sz,tx,ty,tz\n");
    for (a, b) in source.iter().zip(target) {
        writeln!(s, "{},{},{},{},{},{}", a.x, a.y, a.z, b.x, b.y, b.z).unwrap();
    }
    std::fs::write(path, s).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn box_corners() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 39.3),
            Vector3::new(68.7, 0.0, 39.3),
            Vector3::new(68.7, 35.8, 39.3),
            Vector3::new(0.0, 35.8, 0.0),
        ]
    }

    #[test]
    fn identity_from_identical_points() {
        let c = box_corners();
        let t = fit_rigid(&c, &c).unwrap();
        for p in &c {
            assert!((t.apply(p) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn recovers_quarter_turn() {
        let truth = RigidTransform::from_axis_angle(&Vector3::z(), FRAC_PI_2, Vector3::new(1.0, 2.0, 3.0));
        let src = box_corners();
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let t = fit_rigid(&src, &dst).unwrap();
        assert!((t.rotation - truth.rotation).amax() < 1e-9);
        assert!((t.translation - truth.translation).amax() < 1e-9);
    }

    #[test]
    fn collinear_and_mismatched_inputs() {
        let line = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0), Vector3::new(2.0, 2.0, 2.0)];
        assert!(matches!(fit_rigid(&line, &line), Err(Error::Rank(_))));
        let c = box_corners();
        assert!(matches!(fit_rigid(&c, &c[..3]), Err(Error::Argument(_))));
    }

    #[test]
    fn mirrored_target_still_yields_rotation() {
        let src = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let dst: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let t = fit_rigid(&src, &dst).unwrap();
        assert!(t.is_proper(1e-9));
        assert!(t.rotation.determinant() > 0.99);
    }

    #[test]
    fn compose_inverse_round_trip() {
        let a = RigidTransform::from_axis_angle(&Vector3::new(1.0, -2.0, 0.5), 0.7, Vector3::new(3.0, 0.0, -1.0));
        let b = RigidTransform::from_axis_angle(&Vector3::new(0.0, 1.0, 1.0), -1.3, Vector3::new(-2.0, 5.0, 4.0));
        let ab = a.compose(&b);
        for p in box_corners() {
            assert!((ab.apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-9);
            assert!((ab.inverse().apply(&ab.apply(&p)) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let a = RigidTransform::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3, Vector3::new(1.0, 2.0, 3.0));
        a.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.split_whitespace().count(), 12);
        let b = RigidTransform::<f64>::read(&path).unwrap();
        assert!((a.rotation - b.rotation).amax() < 1e-15);
        assert!((a.translation - b.translation).amax() < 1e-15);
    }

    #[test]
    fn correspondence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let s = box_corners();
        let t: Vec<_> = s.iter().map(|p| p * 2.0).collect();
        write_correspondences(&path, &s, &t).unwrap();
        let (a, b) = read_correspondences::<f64>(&path).unwrap();
        assert_eq!(a, s);
        assert_eq!(b, t);
    }

    #[test]
    fn single_precision_fit() {
        let truth = RigidTransform::<f32>::from_axis_angle(&Vector3::new(0.0, 1.0, 0.0), 0.4, Vector3::new(1.0, 0.0, 2.0));
        let src: Vec<Vector3<f32>> = box_corners().iter().map(|p| p.cast()).collect();
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let t = fit_rigid(&src, &dst).unwrap();
        assert!((t.rotation - truth.rotation).amax() < 1e-4);
    }

    #[test]
    fn icp_identical_clouds() {
        let pts: Vec<_> = (0..40).map(|i| Vector3::new((i % 7) as f64, (i / 7) as f64, ((i * 3) % 5) as f64)).collect();
        let c = PointCloud::new(pts).unwrap();
        let r = icp_register(&c, &c, &IcpConfig::new(RigidTransform::identity())).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.mean_residual < 1e-12);
        assert!((r.transform.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(r.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn icp_out_of_range_fails() {
        let a = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.0); 3]).unwrap();
        let b = PointCloud::new(vec![Vector3::new(100.0, 0.0, 0.0); 3]).unwrap();
        assert!(matches!(
            icp_register(&a, &b, &IcpConfig::new(RigidTransform::identity())),
            Err(Error::Registration(_))
        ));
    }
}
