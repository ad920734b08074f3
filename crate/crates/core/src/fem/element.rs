use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Mat12<T> = SMatrix<T, 12, 12>;
pub type Vec12<T> = SVector<T, 12>;

/// Shape-function gradients of a linear tetrahedron and its signed volume.
pub fn shape_gradients<T: Real>(x: &[Vector3<T>; 4]) -> Result<([Vector3<T>; 4], T)> {
    let dm = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    let vol = dm.determinant() / T::lit(6.0);
    let scale = (x[1] - x[0]).norm().max((x[2] - x[0]).norm()).max((x[3] - x[0]).norm());
    if !(vol > T::default_epsilon() * T::lit(100.0) * scale * scale * scale) {
        return Err(Error::Geometry(format!("tetrahedron volume {vol} is not positive")));
    }
    let inv = dm.try_inverse().ok_or_else(|| Error::Geometry("singular tetrahedron".into()))?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Ok(([-(g1 + g2 + g3), g1, g2, g3], vol))
}

/// Constant-strain stiffness `V Bᵀ D B` with Voigt strain
/// `[εxx, εyy, εzz, γxy, γyz, γzx]`. DOF order is vertex-major.
pub fn element_stiffness<T: Real>(x: &[Vector3<T>; 4], lambda: T, mu: T) -> Result<Mat12<T>> {
    let (g, vol) = shape_gradients(x)?;
    let mut b = SMatrix::<T, 6, 12>::zeros();
    for a in 0..4 {
        let (gx, gy, gz) = (g[a].x, g[a].y, g[a].z);
        let c = 3 * a;
        b[(0, c)] = gx;
        b[(1, c + 1)] = gy;
        b[(2, c + 2)] = gz;
        b[(3, c)] = gy;
        b[(3, c + 1)] = gx;
        b[(4, c + 1)] = gz;
        b[(4, c + 2)] = gy;
        b[(5, c)] = gz;
        b[(5, c + 2)] = gx;
    }
    let mut d = SMatrix::<T, 6, 6>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d[(i, j)] = lambda;
        }
        d[(i, i)] = lambda + mu + mu;
        d[(i + 3, i + 3)] = mu;
    }
    let k = b.transpose() * d * b * vol;
    // symmetrize away roundoff
    Ok((k + k.transpose()) * T::lit(0.5))
}

/// Cauchy stress of a linear-elastic strain.
pub fn stress_from_strain<T: Real>(strain: &Matrix3<T>, lambda: T, mu: T) -> Matrix3<T> {
    Matrix3::identity() * (lambda * strain.trace()) + strain * (mu + mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_tet() -> [Vector3<f64>; 4] {
        [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()]
    }

    #[test]
    fn unit_tet_by_hand() {
        // λ = 0, μ = 1: gradients are -(1,1,1), e_x, e_y, e_z and V = 1/6.
        let k = element_stiffness(&unit_tet(), 0.0, 1.0).unwrap();
        // K_{(1,x),(1,x)} = V (∂xN1 ∂xN1 + |∇N1|²) = (1 + 1) / 6
        assert!((k[(3, 3)] - 2.0 / 6.0).abs() < 1e-15);
        // K_{(1,x),(2,y)} = V ∂yN1 ∂xN2 = 0 ; K_{(1,y),(2,x)} = V ∂xN1 ∂yN2 = 1/6
        assert!(k[(3, 7)].abs() < 1e-15);
        assert!((k[(4, 6)] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn translation_null_space_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut x = unit_tet();
            for p in &mut x {
                *p += Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
            }
            let k = element_stiffness(&x, rng.gen_range(0.0..10.0), rng.gen_range(0.1..10.0)).unwrap();
            let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let u = Vec12::from_fn(|i, _| t[i % 3]);
            assert!((k * u).amax() < 1e-9 * k.amax());
            assert_eq!(k, k.transpose());
        }
    }

    #[test]
    fn degenerate_rejected() {
        let flat = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        assert!(matches!(element_stiffness(&flat, 1.0, 1.0), Err(Error::Geometry(_))));
        let inverted = [Vector3::zeros(), Vector3::y(), Vector3::x(), Vector3::z()];
        assert!(element_stiffness(&inverted, 1.0, 1.0).is_err());
    }

    #[test]
    fn stiffness_is_positive_semidefinite() {
        let k = element_stiffness(&unit_tet(), 3.0, 2.0).unwrap();
        let ev = k.symmetric_eigenvalues();
        assert!(ev.iter().all(|&e| e > -1e-12));
        // six rigid modes
        assert_eq!(ev.iter().filter(|e| e.abs() < 1e-10).count(), 6);
    }
}
