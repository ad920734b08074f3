use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softcorr_core::fem::*;
use softcorr_core::mesh::{build_grid_mesh, GridMeshSpec, TetMesh};
use softcorr_core::sync::KinematicsTrajectory;

/// Gradient of the barycentric coordinate of vertex `a`: normal of the
/// opposite face scaled so that its projection onto the edge to `a` is one.
fn oracle_gradients(x: &[Vector3<f64>; 4]) -> [Vector3<f64>; 4] {
    std::array::from_fn(|a| {
        let o: Vec<usize> = (0..4).filter(|&b| b != a).collect();
        let n = (x[o[1]] - x[o[0]]).cross(&(x[o[2]] - x[o[0]]));
        n / n.dot(&(x[a] - x[o[0]]))
    })
}

/// Second derivative of `V (μ ε:ε + λ/2 tr(ε)²)` with respect to nodal
/// displacements, written out index by index.
fn oracle_stiffness(x: &[Vector3<f64>; 4], lambda: f64, mu: f64) -> [[f64; 12]; 12] {
    let g = oracle_gradients(x);
    let vol = (x[1] - x[0]).dot(&(x[2] - x[0]).cross(&(x[3] - x[0]))).abs() / 6.0;
    let mut k = [[0.0; 12]; 12];
    for a in 0..4 {
        for i in 0..3 {
            for b in 0..4 {
                for m in 0..3 {
                    let delta = if i == m { g[a].dot(&g[b]) } else { 0.0 };
                    k[3 * a + i][3 * b + m] = vol * (lambda * g[a][i] * g[b][m] + mu * (g[a][m] * g[b][i] + delta));
                }
            }
        }
    }
    k
}

fn random_tet(rng: &mut ChaCha8Rng) -> [Vector3<f64>; 4] {
    loop {
        let x: [Vector3<f64>; 4] = std::array::from_fn(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
        let v = (x[1] - x[0]).dot(&(x[2] - x[0]).cross(&(x[3] - x[0]))) / 6.0;
        let longest = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).map(|(a, b)| (x[a] - x[b]).norm()).fold(0.0, f64::max);
        if v > 0.02 * longest.powi(3) {
            return x;
        }
    }
}

fn max_rel_err(k: &Mat12<f64>, o: &[[f64; 12]; 12]) -> f64 {
    let scale = o.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for r in 0..12 {
        for c in 0..12 {
            worst = worst.max((k[(r, c)] - o[r][c]).abs() / scale);
        }
    }
    worst
}

#[test]
fn element_stiffness_matches_energy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = random_tet(&mut rng);
        let (l, m) = (rng.gen_range(0.0..2e4), rng.gen_range(1.0..2e3));
        let k = element_stiffness(&x, l, m).unwrap();
        assert!(max_rel_err(&k, &oracle_stiffness(&x, l, m)) < 1e-10);
    }
    let unit = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
    let k = element_stiffness(&unit, 0.0, 1.0).unwrap();
    assert!(max_rel_err(&k, &oracle_stiffness(&unit, 0.0, 1.0)) < 1e-10);
}

#[test]
fn element_stiffness_scales_linearly_with_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let x = random_tet(&mut rng);
        let s = rng.gen_range(0.1..10.0);
        let xs = x.map(|p| p * s);
        let k = element_stiffness(&x, 3.0, 2.0).unwrap();
        let ks = element_stiffness(&xs, 3.0, 2.0).unwrap();
        assert!(max_rel_err(&ks, &oracle_stiffness(&xs, 3.0, 2.0)) < 1e-10);
        assert!((ks - k * s).amax() < 1e-10 * ks.amax());
    }
}

fn phantom() -> TetMesh<f64> {
    build_grid_mesh(&GridMeshSpec::phantom()).unwrap()
}

fn sim(mesh: &TetMesh<f64>, e: f64, cfg: SolverConfig<f64>) -> Simulation<f64> {
    Simulation::new(mesh.clone(), MaterialParams::phantom(e, mesh.rest_volume()), cfg).unwrap()
}

fn far_probe() -> ProbeSphere<f64> {
    ProbeSphere::new(Vector3::new(1e4, 1e4, 1e4))
}

#[test]
fn patch_test_reproduces_constant_stress() {
    let mesh = phantom();
    let material = MaterialParams::phantom(5e3, mesh.rest_volume());
    let eps = Matrix3::new(1e-3, 2e-4, 0.0, 2e-4, -5e-4, 1e-4, 0.0, 1e-4, 3e-4);
    let [nx, ny, nz] = mesh.dims();
    let prescribed: Vec<(usize, Vector3<f64>)> = (0..mesh.vertex_count())
        .filter(|&v| {
            let [i, j, k] = mesh.grid_coords(v);
            i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1
        })
        .map(|v| {
            let x = mesh.vertices()[v];
            (v, x + eps * x)
        })
        .collect();
    assert!(prescribed.len() < mesh.vertex_count());
    let pos = static_solve(&mesh, &material, &prescribed, 1e-14).unwrap();
    let (l, m) = lame_parameters(&material).unwrap();
    let analytic = Matrix3::identity() * (l * eps.trace()) + eps * (2.0 * m);
    for t in 0..mesh.tets().len() {
        let s = element_stress(&mesh, &material, &pos, t).unwrap();
        assert!((s - analytic).norm() / analytic.norm() < 1e-6, "tet {t}");
    }
    for (v, p) in pos.iter().enumerate() {
        let x = mesh.vertices()[v];
        assert!((p - (x + eps * x)).norm() < 1e-9);
    }
}

fn perturbed(sim: &Simulation<f64>, seed: u64) -> FemState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sim.rest_state();
    for v in 0..s.positions.len() {
        if !sim.mesh().is_fixed(v) {
            s.positions[v] += Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            s.velocities[v] = Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        }
    }
    s
}

fn assert_dissipative(dt: f64) {
    let mesh = phantom();
    let cfg = SolverConfig { dt, ..SolverConfig::default() };
    let mut sim = sim(&mesh, 5e3, cfg);
    let mut s = perturbed(&sim, 5);
    let mut e = sim.mechanical_energy(&s);
    assert!(e > 0.0);
    // positions carry ~1e-16 relative roundoff, which puts a floor under
    // the computable energy once the motion has decayed
    let floor = 1e-12 * e;
    for n in 0..500 {
        s = sim.step(&s, &far_probe()).unwrap();
        let next = sim.mechanical_energy(&s);
        assert!(next <= e + floor, "step {n}: energy rose from {e:e} to {next:e}");
        e = next;
    }
}

#[test]
fn energy_non_increasing_at_small_step() {
    assert_dissipative(1.0 / 300.0);
}

#[test]
fn energy_non_increasing_at_large_step() {
    assert_dissipative(1.0 / 30.0);
}

#[test]
fn rest_state_is_a_fixed_point() {
    let mesh = phantom();
    let mut sim = sim(&mesh, 5e3, SolverConfig::default());
    let s0 = sim.rest_state();
    let s1 = sim.step(&s0, &far_probe()).unwrap();
    let dx = s0.positions.iter().zip(&s1.positions).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(dx < 1e-12);
    assert!(!s1.diverged);
}

#[test]
fn contact_penalty_law() {
    let probe = ProbeSphere::new(Vector3::new(0.0, 0.0, 10.0));
    // vertex 1 mm inside the contact radius, below and to the side
    let dir = Vector3::new(1.0, 0.0, -2.0).normalize();
    let p = probe.center + dir * (probe.contact_radius() - 1.0);
    let f = contact_forces(&[p, Vector3::new(50.0, 0.0, 0.0)], &probe);
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].0, 0);
    assert!((f[0].1 - dir * probe.contact_stiffness).norm() < 1e-6);
    let outside = probe.center + dir * (probe.contact_radius() + 1e-9);
    assert!(contact_forces(&[outside], &probe).is_empty());
}

#[test]
fn global_stiffness_symmetric_and_psd() {
    let mesh = build_grid_mesh(&GridMeshSpec::new([4, 3, 3], Vector3::new(12.0, 8.0, 8.0))).unwrap();
    let sim = sim(&mesh, 5e3, SolverConfig::default());
    let state = perturbed(&sim, 9);
    let k = sim.stiffness_matrix(&state.positions).unwrap().to_dense();
    let kmax = k.amax();
    assert!((&k - k.transpose()).amax() < 1e-9 * kmax);
    let ev = k.symmetric_eigenvalues();
    assert!(ev.iter().all(|&e| e > -1e-9 * kmax));
}

fn poke(mesh: &TetMesh<f64>, e: f64) -> (ReplayOutput<f64>, Simulation<f64>) {
    let (lo, hi) = mesh.bounds();
    let cx = (lo.x + hi.x) / 2.0;
    let cy = (lo.y + hi.y) / 2.0;
    let top = hi.z + 5.0;
    let samples: Vec<(f64, Vector3<f64>)> = (0..=150)
        .map(|i| {
            let t = i as f64 / 30.0;
            let depth = 8.0 * (std::f64::consts::PI * t / 5.0).sin();
            (t, Vector3::new(cx, cy, top - depth))
        })
        .collect();
    let traj = KinematicsTrajectory::new(samples).unwrap();
    let schedule = traj.frame_schedule(30.0);
    let mut s = sim(mesh, e, SolverConfig::default());
    let out = run_replay(&mut s, &ProbeSphere::new(Vector3::zeros()), &traj, &schedule).unwrap();
    (out, s)
}

fn max_top_displacement(mesh: &TetMesh<f64>, out: &ReplayOutput<f64>) -> f64 {
    out.present()
        .flat_map(|(_, p)| mesh.top_set().iter().map(move |&v| (p[v] - mesh.vertices()[v]).norm()))
        .fold(0.0, f64::max)
}

#[test]
fn softer_material_deforms_more_and_fixed_vertices_hold() {
    let mesh = phantom();
    let (stiff, _) = poke(&mesh, 5e3);
    let (soft, _) = poke(&mesh, 1e1);
    assert!(!stiff.is_na());
    assert_eq!(stiff.frames.len(), 151);
    let ds = max_top_displacement(&mesh, &stiff);
    assert!(ds > 0.1, "stiff displacement {ds}");
    assert!(!soft.is_na());
    assert!(max_top_displacement(&mesh, &soft) > ds);
    for (_, p) in stiff.present() {
        for &v in mesh.fixed_set() {
            assert!((p[v] - mesh.vertices()[v]).norm() < 1e-12);
        }
    }
}

#[test]
fn replay_far_from_phantom_keeps_rest_shape() {
    let mesh = phantom();
    let traj = KinematicsTrajectory::new((0..10).map(|i| (i as f64 / 30.0, Vector3::new(500.0, 0.0, 0.0))).collect()).unwrap();
    let mut s = sim(&mesh, 5e3, SolverConfig::default());
    let out = run_replay(&mut s, &far_probe(), &traj, &traj.frame_schedule(30.0)).unwrap();
    assert_eq!(out.steps, 90);
    for (_, p) in out.present() {
        assert_eq!(p, mesh.vertices());
    }
}

#[test]
fn replay_uses_interpolated_probe_position() {
    // Probe sweeps down through the block centre between two samples; at the
    // midpoint frame it is halfway, which must match a direct run with the
    // probe at that point.
    let mesh = phantom();
    let (lo, hi) = mesh.bounds();
    let c = (lo + hi) / 2.0;
    let a = Vector3::new(c.x, c.y, hi.z + 20.0);
    let b = Vector3::new(c.x, c.y, hi.z - 4.0);
    let traj = KinematicsTrajectory::new(vec![(0.0, a), (0.2, b)]).unwrap();
    assert_eq!(traj.interpolate(0.1), (a + b) / 2.0);
    let schedule = softcorr_core::sync::FrameSchedule {
        frame_times: vec![0.0, 0.1, 0.2],
        frame_rate: 10.0,
    };
    let mut s = sim(&mesh, 5e3, SolverConfig::default());
    let out = run_replay(&mut s, &ProbeSphere::new(Vector3::zeros()), &traj, &schedule).unwrap();
    let mut manual = sim(&mesh, 5e3, SolverConfig::default());
    let mut st = manual.rest_state();
    for n in 1..=30 {
        let t = n as f64 / 300.0;
        st = manual.step(&st, &ProbeSphere::new(traj.interpolate(t))).unwrap();
    }
    assert_eq!(out.frames[1].positions.as_deref(), Some(&st.positions[..]));
    assert!(out.frames[2].positions.is_some());
}

#[test]
fn deterministic_and_round_trips_to_disk() {
    let mesh = phantom();
    let (a, s) = poke(&mesh, 5e3);
    let (b, _) = poke(&mesh, 5e3);
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(dir.path(), &s, &ProbeSphere::new(Vector3::zeros()), &a).unwrap();
    let back: Vec<(usize, f64, Vec<Vector3<f64>>)> = read_run_dir(dir.path()).unwrap();
    assert_eq!(back.len(), a.frames.len());
    let meta = std::fs::read_to_string(dir.path().join("run_meta")).unwrap();
    assert!(meta.contains("diverged = false"));
    let p = a.frames[75].positions.as_ref().unwrap();
    for (x, y) in p.iter().zip(&back[75].2) {
        assert!((x - y).norm() < 1e-6 * (1.0 + x.norm()));
    }
}

#[test]
fn diverged_state_is_sticky() {
    let mesh = phantom();
    let mut sim = sim(&mesh, 5e3, SolverConfig::default());
    let mut s = sim.rest_state();
    s.diverged = true;
    assert!(matches!(sim.step(&s, &far_probe()), Err(softcorr_core::Error::Diverged)));
    let mut s = sim.rest_state();
    let v = mesh.top_set()[0];
    s.positions[v].z += 1e4;
    let next = sim.step(&s, &far_probe()).unwrap();
    assert!(next.diverged);
}

#[test]
fn cg_iteration_cap_reports_solver_error() {
    let mesh = phantom();
    let cfg = SolverConfig {
        cg_max_iters: 1,
        ..SolverConfig::default()
    };
    let mut sim = sim(&mesh, 5e3, cfg);
    let s = perturbed(&sim, 2);
    assert!(matches!(sim.step(&s, &far_probe()), Err(softcorr_core::Error::Solver { .. })));
}
