use nalgebra::Matrix3;

use crate::scalar::Real;

/// Rotation factor `R` of the polar decomposition `F = R S`.
///
/// Newton iteration `R ← (R + R⁻ᵀ) / 2` for well-conditioned, non-inverted
/// `F`; otherwise an SVD with the smallest singular direction flipped so
/// that `det R = +1`.
pub fn polar_rotation<T: Real>(f: &Matrix3<T>) -> Matrix3<T> {
    let det = f.determinant();
    let scale = f.norm();
    if det > T::lit(1e-3) * scale * scale * scale {
        let tol = T::default_epsilon() * T::lit(64.0);
        let half = T::lit(0.5);
        let mut r = *f;
        for _ in 0..40 {
            let Some(inv) = r.try_inverse() else { break };
            let next = (r + inv.transpose()) * half;
            let delta = (next - r).amax();
            r = next;
            if delta <= tol {
                return r;
            }
        }
    }
    svd_rotation(f)
}

fn svd_rotation<T: Real>(f: &Matrix3<T>) -> Matrix3<T> {
    let svd = f.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut u = u;
    if (u * v_t).determinant() < T::zero() {
        // flip the column paired with the smallest singular value
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].partial_cmp(&svd.singular_values[b]).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(2);
        u.column_mut(k).neg_mut();
    }
    u * v_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_rotation_of_stretched_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64));
            let r = *Rotation3::new(axis * 2.0).matrix();
            let a = nalgebra::Matrix3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            let s = a * a.transpose() + Matrix3::identity() * 0.5;
            let got = polar_rotation(&(r * s));
            assert!((got - r).amax() < 1e-10);
        }
    }

    #[test]
    fn identity_is_exact() {
        assert_eq!(polar_rotation(&Matrix3::<f64>::identity()), Matrix3::identity());
    }

    #[test]
    fn inverted_input_gives_proper_rotation() {
        let f = Matrix3::<f64>::from_diagonal(&Vector3::new(1.0, 1.0, -0.2));
        let r = polar_rotation(&f);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-12);
        let flat = Matrix3::<f64>::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        assert!((polar_rotation(&flat).determinant() - 1.0).abs() < 1e-12);
    }
}
