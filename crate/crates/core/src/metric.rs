//! Frame distance between a simulated mesh and an observed cloud.

use nalgebra::Vector3;

use crate::error::Result;
use crate::mesh::{supersample_quads, SurfaceSamples, TetMesh};
use crate::pointcloud::{chamfer_one_directional, PointCloud};
use crate::scalar::Real;

/// Sub-cells per quad edge when densifying the surface for comparison.
pub const SURFACE_FACTOR: usize = 3;

/// Super-sampled top surface of `positions`.
pub fn top_surface<T: Real>(mesh: &TetMesh<T>, positions: &[Vector3<T>]) -> Result<SurfaceSamples<T>> {
    supersample_quads(mesh, &mesh.top_quads(), positions, SURFACE_FACTOR)
}

/// Mean distance from each observed point to the super-sampled top surface.
pub fn frame_distance<T: Real>(mesh: &TetMesh<T>, positions: &[Vector3<T>], observed: &PointCloud<T>) -> Result<T> {
    let surface = top_surface(mesh, positions)?;
    chamfer_one_directional(observed, &surface.cloud())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid_mesh, GridMeshSpec};

    #[test]
    fn surface_points_are_zero_distance() {
        let mesh = build_grid_mesh(&GridMeshSpec::<f64>::new([4, 3, 3], Vector3::new(3.0, 2.0, 2.0))).unwrap();
        let s = top_surface(&mesh, mesh.vertices()).unwrap();
        assert_eq!(s.len(), 10 * 7);
        assert!(s.points.iter().all(|p| (p.z - 2.0).abs() < 1e-15));
        assert_eq!(frame_distance(&mesh, mesh.vertices(), &s.cloud()).unwrap(), 0.0);
        let lifted = s.cloud().map(|p| p + Vector3::new(0.0, 0.0, 0.25));
        assert!((frame_distance(&mesh, mesh.vertices(), &lifted).unwrap() - 0.25).abs() < 1e-15);
    }
}
