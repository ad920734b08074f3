//! Property oracles runnable from the binary.

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softcorr_core::fem::element_stiffness;
use softcorr_core::mesh::{build_grid_mesh, GridMeshSpec};
use softcorr_core::nalgebra::{Rotation3, Unit, Vector3};
use softcorr_core::net::{CorrectionModel, Normalization, UNetConfig};
use softcorr_core::pointcloud::{chamfer_one_directional, hausdorff, PointCloud};
use softcorr_core::registration::fit_rigid;
use softcorr_core::sync::KinematicsTrajectory;

type Check = fn(&mut ChaCha8Rng, usize) -> Result<(), String>;

fn vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Unit::new_normalize(vec3(rng, 1.0) + Vector3::new(1e-3, 0.0, 0.0));
    Rotation3::from_axis_angle(&axis, rng.gen_range(-3.1..3.1))
}

fn stiffness_null_space(rng: &mut ChaCha8Rng, draws: usize) -> Result<(), String> {
    let mut done = 0;
    while done < draws {
        let x = [vec3(rng, 1.0), vec3(rng, 1.0), vec3(rng, 1.0), vec3(rng, 1.0)];
        let Ok(k) = element_stiffness(&x, 2.0, 1.5) else { continue };
        done += 1;
        let scale = k.amax();
        if (k - k.transpose()).amax() > 1e-12 * scale {
            return Err("stiffness is not symmetric".into());
        }
        let w = vec3(rng, 1.0);
        let t = vec3(rng, 1.0);
        let mut u = softcorr_core::fem::Vec12::<f64>::zeros();
        for a in 0..4 {
            let d = t + w.cross(&x[a]);
            u.fixed_rows_mut::<3>(3 * a).copy_from(&d);
        }
        if (k * u).amax() > 1e-10 * scale * u.amax() {
            return Err("rigid motion produces elastic force".into());
        }
    }
    Ok(())
}

fn rigid_fit(rng: &mut ChaCha8Rng, draws: usize) -> Result<(), String> {
    for _ in 0..draws {
        let r = random_rotation(rng);
        let t = vec3(rng, 100.0);
        let src: Vec<Vector3<f64>> = [[0.0, 0.0, 0.0], [60.0, 0.0, 0.0], [0.0, 30.0, 0.0], [0.0, 0.0, 40.0]].iter().map(|c| Vector3::from(*c)).collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| r * p + t).collect();
        let tf = fit_rigid(&src, &dst).map_err(|e| e.to_string())?;
        let err = (tf.rotation - r.matrix()).amax().max((tf.translation - t).amax());
        if err > 1e-9 {
            return Err(format!("recovery error {err:e}"));
        }
    }
    Ok(())
}

fn cloud_metrics(rng: &mut ChaCha8Rng, draws: usize) -> Result<(), String> {
    for _ in 0..draws {
        let a: Vec<Vector3<f64>> = (0..rng.gen_range(1..80)).map(|_| vec3(rng, 10.0)).collect();
        let b: Vec<Vector3<f64>> = (0..rng.gen_range(1..80)).map(|_| vec3(rng, 10.0)).collect();
        let nearest: Vec<f64> = a.iter().map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).collect();
        let mean = nearest.iter().sum::<f64>() / nearest.len() as f64;
        let max = nearest.iter().cloned().fold(0.0, f64::max);
        let (ca, cb) = (PointCloud::new(a).map_err(|e| e.to_string())?, PointCloud::new(b).map_err(|e| e.to_string())?);
        let c = chamfer_one_directional(&ca, &cb).map_err(|e| e.to_string())?;
        let h = hausdorff(&ca, &cb).map_err(|e| e.to_string())?;
        if (c - mean).abs() > 1e-12 * mean.max(1.0) || h != max {
            return Err(format!("chamfer {c} vs {mean}, hausdorff {h} vs {max}"));
        }
    }
    Ok(())
}

fn interpolation(rng: &mut ChaCha8Rng, draws: usize) -> Result<(), String> {
    for _ in 0..draws {
        let mut t = 0.0;
        let samples: Vec<(f64, Vector3<f64>)> = (0..rng.gen_range(2..20))
            .map(|_| {
                t += rng.gen_range(0.001..0.1);
                (t, vec3(rng, 50.0))
            })
            .collect();
        let traj = KinematicsTrajectory::new(samples.clone()).map_err(|e| e.to_string())?;
        for w in samples.windows(2) {
            let mid = traj.interpolate(0.5 * (w[0].0 + w[1].0));
            if traj.interpolate(w[0].0) != w[0].1 || (mid - 0.5 * (w[0].1 + w[1].1)).amax() > 1e-9 {
                return Err("interpolation misses a knot or midpoint".into());
            }
        }
    }
    Ok(())
}

fn clamp(rng: &mut ChaCha8Rng, draws: usize) -> Result<(), String> {
    let mesh = build_grid_mesh(&GridMeshSpec::<f64>::new([6, 5, 3], Vector3::new(25.0, 20.0, 10.0))).map_err(|e| e.to_string())?;
    let models = draws.clamp(1, 4);
    for m in 0..models {
        let cfg = UNetConfig::for_mesh(&mesh, 2 + m % 2, 0.5).map_err(|e| e.to_string())?;
        let bound = cfg.clamp();
        let model = CorrectionModel::build(cfg, Normalization::for_mesh(&mesh), rng.gen(), false).map_err(|e| e.to_string())?;
        for _ in 0..(draws / models).max(1) {
            let pos: Vec<Vector3<f64>> = mesh.vertices().iter().map(|p| p + vec3(rng, 3.0)).collect();
            let out = model.forward(&mesh, &pos, &vec3(rng, 80.0)).map_err(|e| e.to_string())?;
            let cells = out.spatial_len();
            for (a, b) in bound.iter().enumerate() {
                if out.data()[a * cells..(a + 1) * cells].iter().any(|d| d.abs() > *b) {
                    return Err(format!("axis {a} exceeds {b}"));
                }
            }
        }
    }
    Ok(())
}

pub fn run(draws: usize, seed: u64) -> Result<()> {
    let checks: [(&str, Check); 5] = [
        ("element stiffness symmetry and rigid null space", stiffness_null_space),
        ("rigid fit from four corners", rigid_fit),
        ("chamfer and hausdorff against brute force", cloud_metrics),
        ("trajectory interpolation at knots and midpoints", interpolation),
        ("correction clamp", clamp),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match check(&mut rng, draws) {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} oracle(s) failed");
    }
    Ok(())
}
