use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use super::element::{element_stiffness, shape_gradients, stress_from_strain, Mat12, Vec12};
use super::material::{lame_parameters, MaterialParams};
use super::polar::polar_rotation;
use super::solver::{pcg, CgOutcome, ImplicitSystem, SolverConfig};
use super::sparse::BlockCsr;
use crate::error::{Error, Result};
use crate::mesh::{supersample_surface, SurfaceSamples, TetMesh};
use crate::scalar::Real;

/// Kinematic spherical probe with vertex penalty contact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSphere<T: Real> {
    pub center: Vector3<T>,
    /// mm
    pub radius: T,
    /// g/s², force per mm of penetration
    pub contact_stiffness: T,
    /// mm added to the radius before contact activates
    pub min_contact_distance: T,
    /// Contact points per quad edge: 1 tests mesh vertices only, `r > 1`
    /// tests the bilinear `r × r` subdivision of every boundary quad and
    /// spreads each force onto the quad corners.
    pub contact_resolution: usize,
}

impl<T: Real> ProbeSphere<T> {
    pub fn new(center: Vector3<T>) -> Self {
        Self {
            center,
            radius: T::lit(5.0),
            contact_stiffness: T::lit(1e5),
            min_contact_distance: T::lit(0.5),
            contact_resolution: 4,
        }
    }

    pub fn vertex_contact(mut self) -> Self {
        self.contact_resolution = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > T::zero()) || !(self.min_contact_distance >= T::zero()) || !(self.contact_stiffness >= T::zero()) {
            return Err(Error::Config("probe radius must be positive; contact distance and stiffness non-negative".into()));
        }
        if self.contact_resolution == 0 {
            return Err(Error::Config("contact resolution must be at least 1".into()));
        }
        Ok(())
    }

    /// Distance from the centre below which a vertex is in contact.
    pub fn contact_radius(&self) -> T {
        self.radius + self.min_contact_distance
    }

    /// Penalty force on a vertex at `p` and its normal stiffness
    /// `k n nᵀ`, or `None` outside the contact radius. Penetration is
    /// measured from the contact radius.
    pub fn contact(&self, p: &Vector3<T>) -> Option<(Vector3<T>, Matrix3<T>)> {
        let d = p - self.center;
        let dist = d.norm();
        let pen = self.contact_radius() - dist;
        if !(pen > T::zero()) {
            return None;
        }
        // a vertex exactly at the centre is pushed straight up
        let n = if dist > T::zero() { d / dist } else { Vector3::z() };
        Some((n * (self.contact_stiffness * pen), n * n.transpose() * self.contact_stiffness))
    }
}

/// Per-vertex penalty forces from `probe` on the given vertices.
pub fn contact_forces<T: Real>(positions: &[Vector3<T>], probe: &ProbeSphere<T>) -> Vec<(usize, Vector3<T>)> {
    positions
        .iter()
        .enumerate()
        .filter_map(|(i, p)| probe.contact(p).map(|(f, _)| (i, f)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FemState<T: Real> {
    pub positions: Vec<Vector3<T>>,
    pub velocities: Vec<Vector3<T>>,
    /// s
    pub time: T,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
struct Element<T: Real> {
    verts: [usize; 4],
    rest: [Vector3<T>; 4],
    dm_inv: Matrix3<T>,
    ke: Mat12<T>,
    slots: [usize; 16],
}

/// One corotational FEM instance: precomputed element data plus solver
/// scratch. Single-threaded; build one per concurrent run.
#[derive(Clone, Debug)]
pub struct Simulation<T: Real> {
    mesh: TetMesh<T>,
    material: MaterialParams<T>,
    lame: (T, T),
    solver: SolverConfig<T>,
    gravity: Option<Vector3<T>>,
    mass: Vec<T>,
    free: Vec<bool>,
    elements: Vec<Element<T>>,
    k: BlockCsr<T>,
    warm: Vec<Vector3<T>>,
    last_cg: Option<CgOutcome<T>>,
    contact_points: Option<(usize, SurfaceSamples<T>)>,
}

fn add_rotated_stiffness<T: Real>(e: &Element<T>, r: &Matrix3<T>, k: &mut BlockCsr<T>) {
    let rt = r.transpose();
    for a in 0..4 {
        for b in 0..4 {
            let kab: Matrix3<T> = e.ke.fixed_view::<3, 3>(3 * a, 3 * b).into_owned();
            k.add_at(e.slots[4 * a + b], &(r * kab * rt));
        }
    }
}

fn deformation_gradient<T: Real>(x: [&Vector3<T>; 4], dm_inv: &Matrix3<T>) -> Matrix3<T> {
    Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]) * dm_inv
}

impl<T: Real> Simulation<T> {
    pub fn new(mesh: TetMesh<T>, material: MaterialParams<T>, solver: SolverConfig<T>) -> Result<Self> {
        solver.validate()?;
        let lame = lame_parameters(&material)?;
        let n = mesh.vertex_count();
        // surface quads couple their corners through face contact
        let coupled: Vec<[usize; 4]> = mesh.tets().iter().chain(mesh.surface_quads()).copied().collect();
        let k = BlockCsr::from_elements(n, &coupled);
        let mut mass = vec![T::zero(); n];
        let mut elements = Vec::with_capacity(mesh.tets().len());
        for &verts in mesh.tets() {
            let rest = verts.map(|v| mesh.vertices()[v]);
            let (_, vol) = shape_gradients(&rest)?;
            let ke = element_stiffness(&rest, lame.0, lame.1)?;
            let dm_inv = Matrix3::from_columns(&[rest[1] - rest[0], rest[2] - rest[0], rest[3] - rest[0]])
                .try_inverse()
                .ok_or_else(|| Error::Geometry("singular rest tetrahedron".into()))?;
            let mut slots = [0usize; 16];
            for a in 0..4 {
                for b in 0..4 {
                    slots[4 * a + b] = k.slot(verts[a], verts[b]).expect("pattern covers element");
                }
            }
            let quarter = material.density * vol / T::lit(4.0);
            for &v in &verts {
                mass[v] += quarter;
            }
            elements.push(Element { verts, rest, dm_inv, ke, slots });
        }
        let free = (0..n).map(|v| !mesh.is_fixed(v)).collect();
        Ok(Self {
            warm: vec![Vector3::zeros(); n],
            mesh,
            material,
            lame,
            solver,
            gravity: None,
            mass,
            free,
            elements,
            k,
            last_cg: None,
            contact_points: None,
        })
    }

    /// Enable a constant body acceleration (mm/s²).
    pub fn with_gravity(mut self, g: Vector3<T>) -> Self {
        self.gravity = Some(g);
        self
    }

    pub fn mesh(&self) -> &TetMesh<T> {
        &self.mesh
    }

    pub fn material(&self) -> &MaterialParams<T> {
        &self.material
    }

    pub fn solver(&self) -> &SolverConfig<T> {
        &self.solver
    }

    pub fn lame(&self) -> (T, T) {
        self.lame
    }

    /// Lumped vertex masses in grams.
    pub fn masses(&self) -> &[T] {
        &self.mass
    }

    /// Iteration count and residual of the most recent solve.
    pub fn last_cg(&self) -> Option<CgOutcome<T>> {
        self.last_cg
    }

    pub fn rest_state(&self) -> FemState<T> {
        FemState {
            positions: self.mesh.vertices().to_vec(),
            velocities: vec![Vector3::zeros(); self.mesh.vertex_count()],
            time: T::zero(),
            diverged: false,
        }
    }

    /// Run `steps` steps from rest with the probe held still, e.g. to let a
    /// body load reach equilibrium before a replay.
    pub fn settle(&mut self, probe: &ProbeSphere<T>, steps: usize) -> Result<FemState<T>> {
        let mut state = self.rest_state();
        for _ in 0..steps {
            state = self.step(&state, probe)?;
            if state.diverged {
                return Err(Error::Diverged);
            }
        }
        state.time = T::zero();
        Ok(state)
    }

    fn check_len(&self, positions: &[Vector3<T>]) -> Result<()> {
        if positions.len() != self.mesh.vertex_count() {
            return Err(Error::Shape(format!("{} positions for {} vertices", positions.len(), self.mesh.vertex_count())));
        }
        Ok(())
    }

    fn local_displacement(&self, e: &Element<T>, r: &Matrix3<T>, x: &[Vector3<T>]) -> Vec12<T> {
        let rt = r.transpose();
        let mut u = Vec12::zeros();
        for a in 0..4 {
            let d = rt * x[e.verts[a]] - e.rest[a];
            u.fixed_rows_mut::<3>(3 * a).copy_from(&d);
        }
        u
    }

    fn rotation(&self, e: &Element<T>, x: &[Vector3<T>]) -> Matrix3<T> {
        polar_rotation(&deformation_gradient(e.verts.map(|v| &x[v]), &e.dm_inv))
    }

    /// Corotational elastic forces `−R Kₑ (Rᵀx − X)` summed per vertex.
    pub fn elastic_forces(&self, positions: &[Vector3<T>]) -> Result<Vec<Vector3<T>>> {
        self.check_len(positions)?;
        let mut f = vec![Vector3::zeros(); positions.len()];
        for e in &self.elements {
            let r = self.rotation(e, positions);
            self.scatter_force(e, &r, positions, &mut f);
        }
        Ok(f)
    }

    fn scatter_force(&self, e: &Element<T>, r: &Matrix3<T>, x: &[Vector3<T>], f: &mut [Vector3<T>]) {
        let fl = e.ke * self.local_displacement(e, r, x);
        for a in 0..4 {
            f[e.verts[a]] -= r * fl.fixed_rows::<3>(3 * a);
        }
    }

    /// Global corotational stiffness `Σ R Kₑ Rᵀ` at `positions`.
    pub fn stiffness_matrix(&self, positions: &[Vector3<T>]) -> Result<BlockCsr<T>> {
        self.check_len(positions)?;
        let mut k = self.k.clone();
        k.clear();
        for e in &self.elements {
            add_rotated_stiffness(e, &self.rotation(e, positions), &mut k);
        }
        Ok(k)
    }

    /// Corotational strain energy `Σ ½ uᵀ Kₑ u`, `u = Rᵀx − X`.
    pub fn elastic_energy(&self, positions: &[Vector3<T>]) -> T {
        self.elements.iter().fold(T::zero(), |acc, e| {
            let r = self.rotation(e, positions);
            let u = self.local_displacement(e, &r, positions);
            acc + (u.transpose() * e.ke * u)[0] * T::lit(0.5)
        })
    }

    pub fn kinetic_energy(&self, velocities: &[Vector3<T>]) -> T {
        velocities.iter().zip(&self.mass).fold(T::zero(), |acc, (v, &m)| acc + v.norm_squared() * m * T::lit(0.5))
    }

    pub fn mechanical_energy(&self, state: &FemState<T>) -> T {
        self.kinetic_energy(&state.velocities) + self.elastic_energy(&state.positions)
    }

    /// Advance one implicit Euler step of length `dt` with the probe held at
    /// `probe.center`.
    pub fn step(&mut self, state: &FemState<T>, probe: &ProbeSphere<T>) -> Result<FemState<T>> {
        if state.diverged {
            return Err(Error::Diverged);
        }
        self.check_len(&state.positions)?;
        self.check_len(&state.velocities)?;
        probe.validate()?;
        let x = &state.positions;
        let n = x.len();
        let mut force = vec![Vector3::zeros(); n];
        self.k.clear();
        for i in 0..self.elements.len() {
            let r = self.rotation(&self.elements[i], x);
            self.scatter_force(&self.elements[i], &r, x, &mut force);
            add_rotated_stiffness(&self.elements[i], &r, &mut self.k);
        }
        if let Some(g) = self.gravity {
            for (f, &m) in force.iter_mut().zip(&self.mass) {
                *f += g * m;
            }
        }
        let contact = self.contact_terms(x, probe, &mut force)?;
        let sys = ImplicitSystem {
            mass: &self.mass,
            stiffness: &self.k,
            extra_stiffness: &contact,
            free: &self.free,
        };
        let mut dv = std::mem::take(&mut self.warm);
        let outcome = sys.velocity_update(&force, &state.velocities, &self.solver, &mut dv);
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                self.warm = vec![Vector3::zeros(); n];
                return Err(e);
            }
        };
        self.last_cg = Some(outcome);
        let dt = self.solver.dt;
        let rest = self.mesh.vertices();
        let mut next = FemState {
            positions: Vec::with_capacity(n),
            velocities: Vec::with_capacity(n),
            time: state.time + dt,
            diverged: false,
        };
        for i in 0..n {
            if self.free[i] {
                let v = state.velocities[i] + dv[i];
                next.velocities.push(v);
                next.positions.push(x[i] + v * dt);
            } else {
                next.velocities.push(Vector3::zeros());
                next.positions.push(rest[i]);
            }
        }
        let limit2 = self.solver.divergence_threshold * self.solver.divergence_threshold;
        next.diverged = next
            .positions
            .iter()
            .zip(&next.velocities)
            .zip(rest)
            .any(|((p, v), r)| !(p.iter().chain(v.iter()).all(|c| c.is_finite())) || !((p - r).norm_squared() <= limit2));
        self.warm = if next.diverged { vec![Vector3::zeros(); n] } else { dv };
        Ok(next)
    }

    /// Add penalty forces to `force` and return the contact stiffness blocks.
    fn contact_terms(&mut self, x: &[Vector3<T>], probe: &ProbeSphere<T>, force: &mut [Vector3<T>]) -> Result<Vec<(usize, usize, Matrix3<T>)>> {
        let mut blocks: BTreeMap<(usize, usize), Matrix3<T>> = BTreeMap::new();
        if probe.contact_resolution == 1 {
            for (i, p) in x.iter().enumerate() {
                if let Some((f, kc)) = probe.contact(p) {
                    force[i] += f;
                    blocks.insert((i, i), kc);
                }
            }
        } else {
            if self.contact_points.as_ref().map(|c| c.0) != Some(probe.contact_resolution) {
                let samples = supersample_surface(&self.mesh, self.mesh.vertices(), probe.contact_resolution)?;
                self.contact_points = Some((probe.contact_resolution, samples));
            }
            let (_, samples) = self.contact_points.as_ref().expect("built above");
            let r2 = probe.contact_radius() * probe.contact_radius();
            for w in &samples.weights {
                let p = w.iter().fold(Vector3::zeros(), |acc, &(v, wt)| acc + x[v] * wt);
                if (p - probe.center).norm_squared() >= r2 {
                    continue;
                }
                let Some((f, kc)) = probe.contact(&p) else { continue };
                for &(a, wa) in w {
                    if wa == T::zero() {
                        continue;
                    }
                    force[a] += f * wa;
                    for &(b, wb) in w {
                        if wb != T::zero() {
                            *blocks.entry((a, b)).or_insert_with(Matrix3::zeros) += kc * (wa * wb);
                        }
                    }
                }
            }
        }
        Ok(blocks
            .into_iter()
            .filter(|((a, b), _)| self.free[*a] && self.free[*b])
            .map(|((a, b), m)| (a, b, m))
            .collect())
    }

    /// Reset the CG warm start, making the next step independent of history.
    pub fn reset_warm_start(&mut self) {
        self.warm.iter_mut().for_each(|v| *v = Vector3::zeros());
    }
}

/// Linear-elastic equilibrium with the listed vertices held at the given
/// positions and no other loads. Uses the rest stiffness (no rotation).
pub fn static_solve<T: Real>(
    mesh: &TetMesh<T>,
    material: &MaterialParams<T>,
    prescribed: &[(usize, Vector3<T>)],
    tolerance: T,
) -> Result<Vec<Vector3<T>>> {
    let (lambda, mu) = lame_parameters(material)?;
    let n = mesh.vertex_count();
    let mut k = BlockCsr::from_elements(n, mesh.tets());
    for &verts in mesh.tets() {
        let x = verts.map(|v| mesh.vertices()[v]);
        let ke = element_stiffness(&x, lambda, mu)?;
        for a in 0..4 {
            for b in 0..4 {
                let s = k.slot(verts[a], verts[b]).expect("pattern covers element");
                k.add_at(s, &ke.fixed_view::<3, 3>(3 * a, 3 * b).into_owned());
            }
        }
    }
    let mut free = vec![true; n];
    let mut u_p = vec![Vector3::zeros(); n];
    for &(v, p) in prescribed {
        if v >= n {
            return Err(Error::Argument(format!("prescribed vertex {v} out of range")));
        }
        free[v] = false;
        u_p[v] = p - mesh.vertices()[v];
    }
    let mut rhs = vec![Vector3::zeros(); n];
    k.mul_vec(&u_p, &mut rhs);
    rhs.iter_mut().for_each(|r| *r = -*r);
    let inv_diag: Vec<Vector3<T>> = (0..n).map(|i| k.diagonal(i).diagonal().map(|d| T::one() / d)).collect();
    let mut u_f = vec![Vector3::zeros(); n];
    pcg(|p, y| k.mul_vec(p, y), &inv_diag, &free, &rhs, &mut u_f, tolerance, 20 * 3 * n)?;
    Ok((0..n).map(|i| mesh.vertices()[i] + u_p[i] + u_f[i]).collect())
}

/// Small-strain tensor `sym(F) − I` of tetrahedron `t`.
pub fn element_strain<T: Real>(mesh: &TetMesh<T>, positions: &[Vector3<T>], t: usize) -> Result<Matrix3<T>> {
    let verts = mesh.tets()[t];
    let rest = verts.map(|v| mesh.vertices()[v]);
    let (g, _) = shape_gradients(&rest)?;
    // ∇u = Σ u_a ⊗ ∇N_a
    let grad = (0..4).fold(Matrix3::zeros(), |acc, a| acc + (positions[verts[a]] - rest[a]) * g[a].transpose());
    Ok((grad + grad.transpose()) * T::lit(0.5))
}

/// Linear-elastic Cauchy stress (Pa) of tetrahedron `t`.
pub fn element_stress<T: Real>(mesh: &TetMesh<T>, material: &MaterialParams<T>, positions: &[Vector3<T>], t: usize) -> Result<Matrix3<T>> {
    let (lambda, mu) = lame_parameters(material)?;
    Ok(stress_from_strain(&element_strain(mesh, positions, t)?, lambda, mu))
}
