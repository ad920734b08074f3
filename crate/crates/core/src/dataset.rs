//! Synthetic datasets: per-sequence truth and simulated replays plus
//! rendered observation clouds, split into train / validation / test.
//!
//! Layout under the dataset root:
//! `manifest.txt`, `mesh.txt`, `registration.csv` (sim→camera fiducials) and
//! one directory per sequence holding `trajectory.csv`, `truth/`,
//! `frames/E<modulus>/` and `clouds/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{io_err, parse_err, Error, Result};
use crate::fem::{read_run_dir, run_replay, run_replay_from, write_run_dir, MaterialParams, ProbeSphere, Simulation, SolverConfig};
use crate::mesh::TetMesh;
use crate::pointcloud::{read_cloud_sequence, write_cloud_sequence, PointCloud};
use crate::registration::{fit_rigid, read_correspondences, write_correspondences, RigidTransform};
use crate::sync::KinematicsTrajectory;
use crate::synth::{generate_trajectory, render_observation, ProbeScript, SceneTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// First sequence validates, the next two test, the rest train.
    pub fn for_index(i: usize) -> Self {
        match i {
            0 => Split::Validation,
            1 | 2 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Seconds the truth body is left to sag under gravity before a replay.
pub const SETTLE_TIME: f64 = 1.0;

/// Directory label of a modulus, e.g. `E1e4`, `E2.5e3`.
pub fn modulus_label(e: f64) -> String {
    format!("E{e:e}")
}

/// SplitMix64 finalizer, used to derive independent per-sequence seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub scripts: Vec<ProbeScript>,
    pub truth: SceneTruth,
    /// Materials for the simulations the network will correct.
    pub sim_materials: Vec<MaterialParams<f64>>,
    pub solver: SolverConfig<f64>,
    pub probe: ProbeSphere<f64>,
    /// Hz of the generated kinematics.
    pub kinematics_rate: f64,
    /// Hz of the camera.
    pub frame_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEntry {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub frames: usize,
    /// Per simulated material, the first frame lost to divergence.
    pub sim_na: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub truth_material: MaterialParams<f64>,
    pub sim_materials: Vec<MaterialParams<f64>>,
    pub noise_sigma: f64,
    pub density: f64,
    pub occlusion_radius: f64,
    pub truth_gravity: Option<Vector3<f64>>,
    pub kinematics_rate: f64,
    pub frame_rate: f64,
    pub solver: SolverConfig<f64>,
    pub probe: ProbeSphere<f64>,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# softcorr dataset manifest v1\n");
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("truth_young_modulus", self.truth_material.young_modulus.to_string());
        kv("poisson_ratio", self.truth_material.poisson_ratio.to_string());
        kv("density", self.truth_material.density.to_string());
        let sims: Vec<String> = self.sim_materials.iter().map(|m| m.young_modulus.to_string()).collect();
        kv("sim_young_moduli", sims.join(","));
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("observation_density", self.density.to_string());
        kv("occlusion_radius", self.occlusion_radius.to_string());
        kv("truth_gravity", self.truth_gravity.map_or("none".into(), |g| format!("{},{},{}", g.x, g.y, g.z)));
        kv("kinematics_rate", self.kinematics_rate.to_string());
        kv("frame_rate", self.frame_rate.to_string());
        kv("dt", self.solver.dt.to_string());
        kv("rayleigh_mass", self.solver.rayleigh_mass.to_string());
        kv("rayleigh_stiffness", self.solver.rayleigh_stiffness.to_string());
        kv("cg_tolerance", self.solver.cg_tolerance.to_string());
        kv("cg_max_iters", self.solver.cg_max_iters.to_string());
        kv("divergence_threshold", self.solver.divergence_threshold.to_string());
        kv("probe_radius", self.probe.radius.to_string());
        kv("contact_stiffness", self.probe.contact_stiffness.to_string());
        kv("min_contact_distance", self.probe.min_contact_distance.to_string());
        kv("contact_resolution", self.probe.contact_resolution.to_string());
        for q in &self.sequences {
            let na: Vec<String> = q.sim_na.iter().map(|n| n.map_or("none".into(), |f| f.to_string())).collect();
            writeln!(s, "sequence {} split={} seed={} frames={} sim_na={}", q.name, q.split.as_str(), q.seed, q.frames, na.join(",")).unwrap();
        }
        s
    }

    /// SHA-256 of the manifest text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |r: String| parse_err(path, r);
        let mut kv = std::collections::HashMap::new();
        let mut sequences = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if let Some(rest) = line.strip_prefix("sequence ") {
                let mut it = rest.split_whitespace();
                let name = it.next().ok_or_else(|| bad(format!("`{line}`")))?.to_string();
                let fields: std::collections::HashMap<&str, &str> = it.filter_map(|f| f.split_once('=')).collect();
                let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("sequence {name} lacks {k}")));
                sequences.push(SequenceEntry {
                    split: Split::parse(get("split")?).ok_or_else(|| bad(format!("sequence {name}: unknown split")))?,
                    seed: get("seed")?.parse().map_err(|_| bad(format!("sequence {name}: bad seed")))?,
                    frames: get("frames")?.parse().map_err(|_| bad(format!("sequence {name}: bad frame count")))?,
                    sim_na: get("sim_na")?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| if s == "none" { Ok(None) } else { s.parse().map(Some) })
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("sequence {name}: bad sim_na")))?,
                    name,
                });
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(bad(format!("unrecognized line `{line}`")));
            }
        }
        let num = |k: &str| -> Result<f64> { kv.get(k).ok_or_else(|| bad(format!("missing {k}")))?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let truth_material = MaterialParams {
            young_modulus: num("truth_young_modulus")?,
            poisson_ratio: num("poisson_ratio")?,
            density: num("density")?,
        };
        let sim_materials = kv
            .get("sim_young_moduli")
            .ok_or_else(|| bad("missing sim_young_moduli".into()))?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map(|e| MaterialParams {
                    young_modulus: e,
                    ..truth_material
                })
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad sim_young_moduli".into()))?;
        let truth_gravity = match kv.get("truth_gravity").map(String::as_str) {
            None | Some("none") => None,
            Some(g) => {
                let v: Vec<f64> = g.split(',').map(|c| c.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad truth_gravity".into()))?;
                if v.len() != 3 {
                    return Err(bad("truth_gravity needs three components".into()));
                }
                Some(Vector3::new(v[0], v[1], v[2]))
            }
        };
        Ok(Self {
            seed: kv.get("seed").ok_or_else(|| bad("missing seed".into()))?.parse().map_err(|_| bad("bad seed".into()))?,
            truth_material,
            sim_materials,
            noise_sigma: num("noise_sigma")?,
            density: num("observation_density")?,
            occlusion_radius: num("occlusion_radius")?,
            truth_gravity,
            kinematics_rate: num("kinematics_rate")?,
            frame_rate: num("frame_rate")?,
            solver: SolverConfig {
                dt: num("dt")?,
                rayleigh_mass: num("rayleigh_mass")?,
                rayleigh_stiffness: num("rayleigh_stiffness")?,
                cg_tolerance: num("cg_tolerance")?,
                cg_max_iters: num("cg_max_iters")? as usize,
                divergence_threshold: num("divergence_threshold")?,
            },
            probe: ProbeSphere {
                center: Vector3::zeros(),
                radius: num("probe_radius")?,
                contact_stiffness: num("contact_stiffness")?,
                min_contact_distance: num("min_contact_distance")?,
                contact_resolution: num("contact_resolution")? as usize,
            },
            sequences,
        })
    }
}

/// Eight corners of the rest bounding box, used as registration fiducials.
pub fn fiducials(mesh: &TetMesh<f64>) -> Vec<Vector3<f64>> {
    let (lo, hi) = mesh.bounds();
    (0..8)
        .map(|c| Vector3::new(if c & 1 == 0 { lo.x } else { hi.x }, if c & 2 == 0 { lo.y } else { hi.y }, if c & 4 == 0 { lo.z } else { hi.z }))
        .collect()
}

fn sequence_name(i: usize) -> String {
    format!("seq{i:02}")
}

/// Generate every sequence (in parallel) and write the dataset.
pub fn make_dataset(mesh: &TetMesh<f64>, spec: &DatasetSpec, root: &Path) -> Result<DatasetManifest> {
    if spec.scripts.len() < 3 {
        return Err(Error::Argument("a dataset needs at least 3 sequences".into()));
    }
    spec.truth.validate()?;
    spec.solver.validate()?;
    spec.probe.validate()?;
    for m in &spec.sim_materials {
        m.validate()?;
    }
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    mesh.write_text(&root.join("mesh.txt"))?;
    let fid = fiducials(mesh);
    let cam: Vec<_> = fid.iter().map(|p| spec.truth.camera_transform.apply(p)).collect();
    write_correspondences(&root.join("registration.csv"), &fid, &cam)?;

    let sequences = spec
        .scripts
        .par_iter()
        .enumerate()
        .map(|(i, script)| generate_sequence(mesh, spec, root, i, script))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed: spec.seed,
        truth_material: spec.truth.true_material,
        sim_materials: spec.sim_materials.clone(),
        noise_sigma: spec.truth.noise_sigma,
        density: spec.truth.density,
        occlusion_radius: spec.truth.occlusion_radius,
        truth_gravity: spec.truth.truth_gravity,
        kinematics_rate: spec.kinematics_rate,
        frame_rate: spec.frame_rate,
        solver: spec.solver,
        probe: spec.probe,
        sequences,
    };
    manifest.write(&root.join("manifest.txt"))?;
    Ok(manifest)
}

fn generate_sequence(mesh: &TetMesh<f64>, spec: &DatasetSpec, root: &Path, i: usize, script: &ProbeScript) -> Result<SequenceEntry> {
    let name = sequence_name(i);
    let fail = |e: Error| Error::Dataset {
        sequence: name.clone(),
        reason: e.to_string(),
    };
    let seed = mix_seed(spec.seed, i as u64);
    let dir = root.join(&name);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let raw = generate_trajectory(script, mesh, spec.kinematics_rate, seed).map_err(fail)?;
    raw.write_csv(&dir.join("trajectory.csv"))?;
    let frames = raw.subsample_to_frames(spec.frame_rate).map_err(fail)?;
    let schedule = frames.frame_schedule(spec.frame_rate);

    let mut truth_sim = Simulation::new(mesh.clone(), spec.truth.true_material, spec.solver).map_err(fail)?;
    let mut initial = truth_sim.rest_state();
    if let Some(g) = spec.truth.truth_gravity {
        truth_sim = truth_sim.with_gravity(g);
        let hold = ProbeSphere {
            center: frames.samples()[0].1,
            ..spec.probe
        };
        let steps = (SETTLE_TIME / spec.solver.dt).round() as usize;
        initial = truth_sim.settle(&hold, steps).map_err(fail)?;
    }
    let truth = run_replay_from(&mut truth_sim, &spec.probe, &frames, &schedule, initial, |_, _| Ok(())).map_err(fail)?;
    if truth.is_na() {
        return Err(fail(Error::Generation(format!(
            "truth simulation failed at frame {}: {}",
            truth.diverged_at_frame.unwrap_or(0),
            truth.failure.clone().unwrap_or_default()
        ))));
    }
    write_run_dir(&dir.join("truth"), &truth_sim, &spec.probe, &truth)?;

    let mut clouds = Vec::with_capacity(truth.frames.len());
    for (f, pos) in truth.present() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0B5E_4E));
        rng.set_stream(f.frame_id as u64);
        let probe = frames.samples()[f.frame_id].1;
        let cloud = render_observation(pos, mesh, &spec.truth, &probe, &mut rng).map_err(fail)?;
        clouds.push((f.frame_id, f.time, cloud));
    }
    write_cloud_sequence(&dir.join("clouds"), &clouds)?;

    let mut sim_na = Vec::with_capacity(spec.sim_materials.len());
    for m in &spec.sim_materials {
        let mut sim = Simulation::new(mesh.clone(), *m, spec.solver).map_err(fail)?;
        let out = run_replay(&mut sim, &spec.probe, &frames, &schedule).map_err(fail)?;
        write_run_dir(&dir.join("frames").join(modulus_label(m.young_modulus)), &sim, &spec.probe, &out)?;
        sim_na.push(out.diverged_at_frame);
    }
    log::info!("generated {name}: {} frames", frames.len());
    Ok(SequenceEntry {
        name,
        split: Split::for_index(i),
        seed,
        frames: frames.len(),
        sim_na,
    })
}

/// One labelled frame: simulated vertices, probe centre and the observed
/// cloud registered into the simulation frame.
#[derive(Clone, Debug)]
pub struct FrameSample {
    pub frame_id: usize,
    pub time: f64,
    pub probe: Vector3<f64>,
    pub sim: Vec<Vector3<f64>>,
    pub observed: PointCloud<f64>,
}

#[derive(Clone, Debug)]
pub struct SequenceData {
    pub name: String,
    pub split: Split,
    /// Frame-rate probe trajectory the simulations replayed.
    pub trajectory: KinematicsTrajectory<f64>,
    /// Frames with both a simulated mesh and an observation.
    pub frames: Vec<FrameSample>,
    /// Observations for every frame, including ones the simulation lost.
    pub observed: Vec<(usize, f64, PointCloud<f64>)>,
    pub sim_na: Option<usize>,
}

/// Read access to a generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub mesh: TetMesh<f64>,
    /// Camera → simulation registration from the fiducials.
    pub camera_to_sim: RigidTransform<f64>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&root.join("manifest.txt"))?;
        let mesh = TetMesh::read_text(&root.join("mesh.txt"))?;
        let (sim, cam) = read_correspondences(&root.join("registration.csv"))?;
        let camera_to_sim = fit_rigid(&cam, &sim)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            mesh,
            camera_to_sim,
        })
    }

    pub fn names(&self, split: Split) -> Vec<String> {
        self.manifest.sequences.iter().filter(|s| s.split == split).map(|s| s.name.clone()).collect()
    }

    fn entry(&self, name: &str) -> Result<&SequenceEntry> {
        self.manifest
            .sequences
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Argument(format!("dataset has no sequence {name}")))
    }

    pub fn trajectory(&self, name: &str) -> Result<KinematicsTrajectory<f64>> {
        self.entry(name)?;
        KinematicsTrajectory::read_csv(&self.root.join(name).join("trajectory.csv"))?.subsample_to_frames(self.manifest.frame_rate)
    }

    /// Observed clouds of a sequence in the simulation frame.
    pub fn observations(&self, name: &str) -> Result<Vec<(usize, f64, PointCloud<f64>)>> {
        self.entry(name)?;
        Ok(read_cloud_sequence::<f64>(&self.root.join(name).join("clouds"))?
            .into_iter()
            .map(|(id, t, c)| (id, t, self.camera_to_sim.apply_cloud(&c)))
            .collect())
    }

    /// Frames of `name` simulated at modulus `e`, paired with observations.
    pub fn load_sequence(&self, name: &str, e: f64) -> Result<SequenceData> {
        let entry = self.entry(name)?;
        let k = self
            .manifest
            .sim_materials
            .iter()
            .position(|m| m.young_modulus == e)
            .ok_or_else(|| Error::Argument(format!("dataset has no simulation at E = {e:e}")))?;
        let trajectory = self.trajectory(name)?;
        let observed = self.observations(name)?;
        let sim: Vec<(usize, f64, Vec<Vector3<f64>>)> = read_run_dir(&self.root.join(name).join("frames").join(modulus_label(e)))?;
        let mut frames = Vec::with_capacity(sim.len());
        for (id, t, pos) in sim {
            let Some((_, _, cloud)) = observed.iter().find(|o| o.0 == id) else {
                continue;
            };
            frames.push(FrameSample {
                frame_id: id,
                time: t,
                probe: trajectory.samples()[id].1,
                sim: pos,
                observed: cloud.clone(),
            });
        }
        Ok(SequenceData {
            name: name.to_string(),
            split: entry.split,
            trajectory,
            frames,
            observed,
            sim_na: entry.sim_na[k],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid_mesh, GridMeshSpec};
    use crate::metric::frame_distance;
    use crate::synth::random_scripts;

    fn tiny() -> TetMesh<f64> {
        build_grid_mesh(&GridMeshSpec::new([6, 4, 3], Vector3::new(30.0, 20.0, 10.0))).unwrap()
    }

    fn spec(mesh: &TetMesh<f64>, n: usize, seed: u64) -> DatasetSpec {
        let vol = mesh.rest_volume();
        let mut truth = SceneTruth::new(mesh, MaterialParams::phantom(5e3, vol));
        truth.noise_sigma = 0.2;
        truth.density = 0.5;
        DatasetSpec {
            scripts: random_scripts(mesh, n, 1, (1.0, 2.0), (0.2, 0.3), 3, seed),
            truth,
            sim_materials: vec![MaterialParams::phantom(1e4, vol)],
            solver: SolverConfig::default(),
            probe: ProbeSphere::new(Vector3::zeros()),
            kinematics_rate: 1000.0,
            frame_rate: 30.0,
            seed,
        }
    }

    #[test]
    fn thirteen_sequences_split_ten_one_two() {
        let splits: Vec<Split> = (0..13).map(Split::for_index).collect();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (10, 1, 2));
    }

    #[test]
    fn fixed_seed_gives_identical_manifest_hash() {
        let mesh = tiny();
        let dir = tempfile::tempdir().unwrap();
        let a = make_dataset(&mesh, &spec(&mesh, 3, 5), &dir.path().join("a")).unwrap();
        let b = make_dataset(&mesh, &spec(&mesh, 3, 5), &dir.path().join("b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        for f in ["mesh.txt", "seq02/clouds/frame_000003.xyz", "seq02/truth/frame_000003.txt", "seq02/frames/E1e4/frame_000003.txt"] {
            let (x, y) = (dir.path().join("a").join(f), dir.path().join("b").join(f));
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{f}");
        }
        let c = make_dataset(&mesh, &spec(&mesh, 3, 6), &dir.path().join("c")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn manifest_round_trips() {
        let mesh = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(&mesh, 3, 1);
        s.truth.truth_gravity = Some(Vector3::new(0.0, 0.0, -9810.0));
        let m = make_dataset(&mesh, &s, dir.path()).unwrap();
        let back = DatasetManifest::read(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.sequences.iter().map(|q| q.split).collect::<Vec<_>>(), vec![Split::Validation, Split::Test, Split::Test]);
    }

    #[test]
    fn matching_noise_free_truth_reproduces_observations() {
        let mesh = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(&mesh, 3, 2);
        s.truth.noise_sigma = 0.0;
        s.truth.density = 0.2;
        s.sim_materials = vec![s.truth.true_material];
        make_dataset(&mesh, &s, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for name in ds.names(Split::Test) {
            let seq = ds.load_sequence(&name, 5e3).unwrap();
            assert_eq!(seq.frames.len(), seq.observed.len());
            let mean = seq.frames.iter().map(|f| frame_distance(&mesh, &f.sim, &f.observed).unwrap()).sum::<f64>() / seq.frames.len() as f64;
            assert!(mean < 1e-5, "{name}: {mean}");
        }
    }

    #[test]
    fn too_few_scripts_rejected() {
        let mesh = tiny();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(make_dataset(&mesh, &spec(&mesh, 2, 0), dir.path()), Err(Error::Argument(_))));
    }
}
