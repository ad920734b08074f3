//! Run configuration: one TOML file, overridable per key from the command
//! line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use serde::Deserialize;
use softcorr_core::dataset::DatasetSpec;
use softcorr_core::fem::{MaterialParams, ProbeSphere, SolverConfig, PHANTOM_MASS_G};
use softcorr_core::mesh::{build_grid_mesh, GridMeshSpec, TetMesh};
use softcorr_core::nalgebra::Vector3;
use softcorr_core::net::TrainConfig;
use softcorr_core::search::SearchSpec;
use softcorr_core::synth::{random_scripts, SceneTruth};

use crate::UserError;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub mesh: MeshSection,
    pub material: MaterialSection,
    pub solver: SolverSection,
    pub probe: ProbeSection,
    pub scene: SceneSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub search: SearchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            mesh: MeshSection::default(),
            material: MaterialSection::default(),
            solver: SolverSection::default(),
            probe: ProbeSection::default(),
            scene: SceneSection::default(),
            network: NetworkSection::default(),
            training: TrainingSection::default(),
            search: SearchSection::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    /// A `tetmesh v1` file; overrides the lattice below when set.
    pub file: Option<PathBuf>,
    pub nodes: [usize; 3],
    pub extents: [f64; 3],
}

impl Default for MeshSection {
    fn default() -> Self {
        let p = GridMeshSpec::phantom();
        Self {
            file: None,
            nodes: p.node_counts,
            extents: [p.extents.x, p.extents.y, p.extents.z],
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSection {
    /// Pa. Modulus used by `simulate`.
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    /// Total mass in g; density follows from the rest volume.
    pub mass: f64,
}

impl Default for MaterialSection {
    fn default() -> Self {
        Self {
            young_modulus: 5e3,
            poisson_ratio: 0.45,
            mass: PHANTOM_MASS_G,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub dt: f64,
    pub rayleigh_mass: f64,
    pub rayleigh_stiffness: f64,
    pub cg_tolerance: f64,
    pub cg_max_iters: usize,
    pub divergence_threshold: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::<f64>::default();
        Self {
            dt: s.dt,
            rayleigh_mass: s.rayleigh_mass,
            rayleigh_stiffness: s.rayleigh_stiffness,
            cg_tolerance: s.cg_tolerance,
            cg_max_iters: s.cg_max_iters,
            divergence_threshold: s.divergence_threshold,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub radius: f64,
    pub contact_stiffness: f64,
    pub min_contact_distance: f64,
    pub contact_resolution: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeSphere::<f64>::new(Vector3::zeros());
        Self {
            radius: p.radius,
            contact_stiffness: p.contact_stiffness,
            min_contact_distance: p.min_contact_distance,
            contact_resolution: p.contact_resolution,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub true_young_modulus: f64,
    pub sim_young_moduli: Vec<f64>,
    pub noise_sigma: f64,
    /// Observed points per mm².
    pub density: f64,
    pub occlusion_radius: f64,
    /// Downward body acceleration in the truth simulation only, mm/s²; 0 disables.
    pub truth_gravity: f64,
    pub sequences: usize,
    pub pokes_per_sequence: usize,
    pub depth: [f64; 2],
    pub poke_duration: [f64; 2],
    /// Every n-th sequence presses the sides instead of the top; 0 never.
    pub side_every: usize,
    pub kinematics_rate: f64,
    pub frame_rate: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            true_young_modulus: 5e3,
            sim_young_moduli: vec![1e4, 1e1],
            noise_sigma: 2.0,
            density: 16.5,
            occlusion_radius: 5.0,
            truth_gravity: 0.0,
            sequences: 13,
            pokes_per_sequence: 4,
            depth: [4.0, 12.0],
            poke_duration: [1.5, 2.5],
            side_every: 3,
            kinematics_rate: 1000.0,
            frame_rate: 30.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub clamp_fraction: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { clamp_fraction: 0.5 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Use every n-th frame of each sequence.
    pub frame_stride: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            patience: t.patience,
            frame_stride: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub coarse_values: Vec<f64>,
    pub fine_fractions: Vec<f64>,
    pub fine_window: usize,
    /// Sequence replayed for every candidate; empty means the first
    /// training sequence.
    pub sequence: String,
    pub cache: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchSpec::default();
        Self {
            coarse_values: s.coarse_values,
            fine_fractions: s.fine_fractions,
            fine_window: s.fine_window,
            sequence: String::new(),
            cache: true,
        }
    }
}

/// Set `section.key` (or a top-level `key`) in a parsed TOML table.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| UserError::new(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("non-empty split");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| UserError::new(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse `path` (or defaults when `None`) and apply `section.key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| UserError::new(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| UserError::new(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| UserError::new(format!("config: {e}")))?;
        cfg.check_files(path.and_then(Path::parent))?;
        Ok(cfg)
    }

    fn check_files(&self, base: Option<&Path>) -> Result<()> {
        if let Some(f) = &self.mesh.file {
            let p = resolve(base, f);
            if !p.exists() {
                bail!(UserError::new(format!("mesh file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn build_mesh(&self, base: Option<&Path>) -> Result<TetMesh<f64>> {
        match &self.mesh.file {
            Some(f) => Ok(TetMesh::read_text(&resolve(base, f))?),
            None => {
                let [x, y, z] = self.mesh.extents;
                Ok(build_grid_mesh(&GridMeshSpec::new(self.mesh.nodes, Vector3::new(x, y, z)))?)
            }
        }
    }

    pub fn material(&self, mesh: &TetMesh<f64>, young_modulus: f64) -> MaterialParams<f64> {
        MaterialParams::from_mass(young_modulus, self.material.poisson_ratio, self.material.mass, mesh.rest_volume())
    }

    pub fn solver(&self) -> SolverConfig<f64> {
        let s = &self.solver;
        SolverConfig {
            dt: s.dt,
            rayleigh_mass: s.rayleigh_mass,
            rayleigh_stiffness: s.rayleigh_stiffness,
            cg_tolerance: s.cg_tolerance,
            cg_max_iters: s.cg_max_iters,
            divergence_threshold: s.divergence_threshold,
        }
    }

    pub fn probe(&self) -> ProbeSphere<f64> {
        let p = &self.probe;
        ProbeSphere {
            center: Vector3::zeros(),
            radius: p.radius,
            contact_stiffness: p.contact_stiffness,
            min_contact_distance: p.min_contact_distance,
            contact_resolution: p.contact_resolution,
        }
    }

    pub fn dataset_spec(&self, mesh: &TetMesh<f64>) -> Result<DatasetSpec> {
        let s = &self.scene;
        let mut truth = SceneTruth::new(mesh, self.material(mesh, s.true_young_modulus));
        truth.noise_sigma = s.noise_sigma;
        truth.density = s.density;
        truth.occlusion_radius = s.occlusion_radius;
        truth.truth_gravity = (s.truth_gravity != 0.0).then(|| Vector3::new(0.0, 0.0, -s.truth_gravity));
        let scripts = random_scripts(mesh, s.sequences, s.pokes_per_sequence, (s.depth[0], s.depth[1]), (s.poke_duration[0], s.poke_duration[1]), s.side_every, self.seed);
        Ok(DatasetSpec {
            scripts,
            truth,
            sim_materials: s.sim_young_moduli.iter().map(|&e| self.material(mesh, e)).collect(),
            solver: self.solver(),
            probe: self.probe(),
            kinematics_rate: s.kinematics_rate,
            frame_rate: s.frame_rate,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            seed: self.seed,
            clamp_fraction: self.network.clamp_fraction,
            patience: self.training.patience,
        }
    }

    pub fn search_spec(&self) -> SearchSpec {
        SearchSpec {
            coarse_values: self.search.coarse_values.clone(),
            fine_fractions: self.search.fine_fractions.clone(),
            fine_window: self.search.fine_window,
            cache_dir: self.search.cache.then(|| self.output_dir.join("search").join("cache")),
        }
    }
}

fn resolve(base: Option<&Path>, f: &Path) -> PathBuf {
    match base {
        Some(b) if f.is_relative() => b.join(f),
        _ => f.to_path_buf(),
    }
}

pub fn parse_modulus(s: &str) -> Result<f64> {
    s.parse::<f64>().ok().filter(|e| *e > 0.0).ok_or_else(|| anyhow!(UserError::new(format!("`{s}` is not a positive modulus"))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::load(None, &["scene.sequences=5".into(), "seed=9".into(), "scene.sim_young_moduli=[2e3]".into()]).unwrap();
        assert_eq!(cfg.scene.sequences, 5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scene.sim_young_moduli, vec![2e3]);
        assert_eq!(cfg.mesh.nodes, [13, 5, 5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["scene.colour=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<UserError>().is_some());
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn missing_mesh_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[mesh]\nfile = \"nope.txt\"\n").unwrap();
        let err = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("nope.txt"));
    }

    #[test]
    fn string_override_falls_back_to_text() {
        let cfg = RunConfig::load(None, &["search.sequence=seq04".into(), "output_dir=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.search.sequence, "seq04");
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }
}
