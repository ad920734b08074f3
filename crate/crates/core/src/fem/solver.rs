//! Implicit Euler velocity update with Rayleigh damping, solved by
//! Jacobi-preconditioned conjugate gradients.

use nalgebra::{Matrix3, Vector3};

use super::sparse::BlockCsr;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig<T: Real> {
    /// s
    pub dt: T,
    pub rayleigh_mass: T,
    pub rayleigh_stiffness: T,
    /// Relative residual `‖r‖ / ‖b‖`.
    pub cg_tolerance: T,
    pub cg_max_iters: usize,
    /// mm of displacement from rest.
    pub divergence_threshold: T,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            dt: T::lit(1.0 / 300.0),
            rayleigh_mass: T::lit(0.1),
            rayleigh_stiffness: T::lit(0.1),
            cg_tolerance: T::lit(1e-8),
            cg_max_iters: 1000,
            divergence_threshold: T::lit(500.0),
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.rayleigh_mass >= T::zero()) || !(self.rayleigh_stiffness >= T::zero()) {
            return Err(Error::Config("rayleigh coefficients must be non-negative".into()));
        }
        if !(self.divergence_threshold > T::zero()) {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        if !(self.cg_tolerance > T::zero()) || self.cg_max_iters == 0 {
            return Err(Error::Config("CG tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOutcome<T: Real> {
    pub iterations: usize,
    pub relative_residual: T,
}

fn dot<T: Real>(a: &[Vector3<T>], b: &[Vector3<T>]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + x.dot(y))
}

/// Solve `A x = b` on the free vertices, `x` holding the initial guess.
/// Constrained vertices are pinned to zero.
pub fn pcg<T: Real>(
    mut apply: impl FnMut(&[Vector3<T>], &mut [Vector3<T>]),
    inv_diag: &[Vector3<T>],
    free: &[bool],
    b: &[Vector3<T>],
    x: &mut [Vector3<T>],
    tol: T,
    max_iters: usize,
) -> Result<CgOutcome<T>> {
    let n = b.len();
    let mask = |v: &mut [Vector3<T>]| {
        for (vi, &f) in v.iter_mut().zip(free) {
            if !f {
                *vi = Vector3::zeros();
            }
        }
    };
    let mut rhs = b.to_vec();
    mask(&mut rhs);
    let b_norm = dot(&rhs, &rhs).sqrt();
    if b_norm == T::zero() {
        x.iter_mut().for_each(|v| *v = Vector3::zeros());
        return Ok(CgOutcome {
            iterations: 0,
            relative_residual: T::zero(),
        });
    }
    mask(x);
    let mut ax = vec![Vector3::zeros(); n];
    apply(x, &mut ax);
    let mut r: Vec<Vector3<T>> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    mask(&mut r);
    let precondition = |r: &[Vector3<T>], z: &mut [Vector3<T>]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv_diag) {
            *zi = ri.component_mul(di);
        }
    };
    let mut z = vec![Vector3::zeros(); n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = ax;
    let mut res = dot(&r, &r).sqrt() / b_norm;
    let mut it = 0;
    while res > tol {
        if it == max_iters {
            return Err(Error::Solver {
                iterations: it,
                residual: res.as_f64(),
            });
        }
        apply(&p, &mut ap);
        mask(&mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::Solver {
                iterations: it,
                residual: res.as_f64(),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
        res = dot(&r, &r).sqrt() / b_norm;
        it += 1;
    }
    Ok(CgOutcome {
        iterations: it,
        relative_residual: res,
    })
}

/// Linearized system around the current state: lumped masses, elastic
/// stiffness, and extra stiffness blocks `(row, col, block)` (contact) that
/// enter only the `dt²` term.
pub struct ImplicitSystem<'a, T: Real> {
    pub mass: &'a [T],
    pub stiffness: &'a BlockCsr<T>,
    pub extra_stiffness: &'a [(usize, usize, Matrix3<T>)],
    pub free: &'a [bool],
}

impl<T: Real> ImplicitSystem<'_, T> {
    /// Solve `(M + dt C + dt² K) Δv = dt (f − (C + dt K) v)` with
    /// `C = αM + βK`. `dv` holds the warm start and receives `Δv`.
    pub fn velocity_update(
        &self,
        force: &[Vector3<T>],
        v: &[Vector3<T>],
        cfg: &SolverConfig<T>,
        dv: &mut [Vector3<T>],
    ) -> Result<CgOutcome<T>> {
        let n = self.mass.len();
        let dt = cfg.dt;
        let (alpha, beta) = (cfg.rayleigh_mass, cfg.rayleigh_stiffness);
        let m_coef = T::one() + dt * alpha;
        let k_coef = dt * beta + dt * dt;
        let dt2 = dt * dt;

        // y = m_coef M x + k_coef K x + dt² K_extra x
        let apply = |x: &[Vector3<T>], y: &mut [Vector3<T>]| {
            self.stiffness.mul_vec(x, y);
            for i in 0..n {
                y[i] = y[i] * k_coef + x[i] * (m_coef * self.mass[i]);
            }
            for (i, j, kc) in self.extra_stiffness {
                y[*i] += kc * x[*j] * dt2;
            }
        };

        // b = dt f − dt (α M v + (β + dt) K v + dt K_extra v)
        let mut kv = vec![Vector3::zeros(); n];
        self.stiffness.mul_vec(v, &mut kv);
        let mut b: Vec<Vector3<T>> = (0..n)
            .map(|i| (force[i] - v[i] * (alpha * self.mass[i]) - kv[i] * (beta + dt)) * dt)
            .collect();
        for (i, j, kc) in self.extra_stiffness {
            b[*i] -= kc * v[*j] * dt2;
        }

        let mut diag: Vec<Vector3<T>> = (0..n)
            .map(|i| self.stiffness.diagonal(i).diagonal() * k_coef + Vector3::repeat(m_coef * self.mass[i]))
            .collect();
        for (i, _, kc) in self.extra_stiffness.iter().filter(|e| e.0 == e.1) {
            diag[*i] += kc.diagonal() * dt2;
        }
        let inv_diag: Vec<Vector3<T>> = diag.iter().map(|d| d.map(|x| T::one() / x)).collect();
        pcg(apply, &inv_diag, self.free, &b, dv, cfg.cg_tolerance, cfg.cg_max_iters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dof_spring_matches_closed_form() {
        let (k, m) = (250.0, 0.7);
        let (x0, v0) = (0.3, -1.2);
        let mut kmat = BlockCsr::<f64>::from_elements(1, &[]);
        let s = kmat.slot(0, 0).unwrap();
        kmat.add_at(s, &Matrix3::from_diagonal(&Vector3::new(k, 0.0, 0.0)));
        let mut cfg = SolverConfig::default();
        cfg.cg_tolerance = 1e-14;
        let sys = ImplicitSystem {
            mass: &[m],
            stiffness: &kmat,
            extra_stiffness: &[],
            free: &[true],
        };
        let mut dv = [Vector3::zeros()];
        sys.velocity_update(&[Vector3::new(-k * x0, 0.0, 0.0)], &[Vector3::new(v0, 0.0, 0.0)], &cfg, &mut dv).unwrap();
        let v1 = v0 + dv[0].x;
        let (dt, a, b) = (cfg.dt, cfg.rayleigh_mass, cfg.rayleigh_stiffness);
        let expected = (v0 - dt * (k / m) * x0) / (1.0 + dt * a + dt * (k / m) * (b + dt));
        assert!(((v1 - expected) / expected).abs() < 1e-8);
        assert_eq!(dv[0].y, 0.0);
    }

    #[test]
    fn pcg_solves_spd_system_and_respects_mask() {
        // tridiagonal 1-D Laplacian plus identity on x components
        let n = 20;
        let elems: Vec<[usize; 4]> = (0..n - 1).map(|i| [i, i + 1, i + 1, i + 1]).collect();
        let mut a = BlockCsr::<f64>::from_elements(n, &elems);
        for i in 0..n {
            let s = a.slot(i, i).unwrap();
            a.add_at(s, &(Matrix3::identity() * 3.0));
            if i + 1 < n {
                let s = a.slot(i, i + 1).unwrap();
                a.add_at(s, &(-Matrix3::identity()));
                let s = a.slot(i + 1, i).unwrap();
                a.add_at(s, &(-Matrix3::identity()));
            }
        }
        let b: Vec<_> = (0..n).map(|i| Vector3::new(i as f64, 1.0, -2.0)).collect();
        let mut free = vec![true; n];
        free[0] = false;
        let inv: Vec<_> = (0..n).map(|_| Vector3::repeat(1.0 / 3.0)).collect();
        let mut x = vec![Vector3::zeros(); n];
        let out = pcg(|p, y| a.mul_vec(p, y), &inv, &free, &b, &mut x, 1e-12, 200).unwrap();
        assert!(out.relative_residual <= 1e-12);
        assert_eq!(x[0], Vector3::zeros());
        let mut ax = vec![Vector3::zeros(); n];
        a.mul_vec(&x, &mut ax);
        for i in 1..n {
            assert!((ax[i] - b[i]).amax() < 1e-9);
        }
        let mut y = vec![Vector3::zeros(); n];
        assert!(matches!(
            pcg(|p, y| a.mul_vec(p, y), &inv, &free, &b, &mut y, 1e-30, 2),
            Err(Error::Solver { iterations: 2, .. })
        ));
    }
}
