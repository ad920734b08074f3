//! Two-stage grid search over Young's modulus: a decade sweep, then a finer
//! sweep inside the best-scoring range.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::fem::{read_run_dir, run_replay, write_run_dir, MaterialParams, ProbeSphere, Simulation, SolverConfig};
use crate::mesh::TetMesh;
use crate::metric::frame_distance;
use crate::pointcloud::PointCloud;
use crate::sync::KinematicsTrajectory;

/// Everything a single search run needs besides the modulus.
#[derive(Clone, Debug)]
pub struct SearchScene {
    pub mesh: TetMesh<f64>,
    /// Poisson ratio and density are taken from here; the modulus is swept.
    pub base_material: MaterialParams<f64>,
    pub solver: SolverConfig<f64>,
    pub probe: ProbeSphere<f64>,
    /// Frame-rate probe trajectory.
    pub trajectory: KinematicsTrajectory<f64>,
    pub frame_rate: f64,
    /// `(frame index, cloud in the simulation frame)`.
    pub observed: Vec<(usize, PointCloud<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpec {
    pub coarse_values: Vec<f64>,
    /// Fractions of each decade's upper end sampled in the fine stage.
    pub fine_fractions: Vec<f64>,
    /// Consecutive coarse values whose decades the fine stage covers.
    pub fine_window: usize,
    /// Where per-modulus runs are cached; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            coarse_values: vec![1e1, 1e2, 1e3, 1e4, 1e5, 1e6],
            fine_fractions: vec![0.25, 0.5, 0.75],
            fine_window: 3,
            cache_dir: None,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_values.is_empty() || self.coarse_values.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config("coarse values must be positive".into()));
        }
        if self.coarse_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("coarse values must be strictly increasing".into()));
        }
        if self.fine_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config("fine fractions must lie in (0, 1)".into()));
        }
        if self.fine_window < 2 {
            return Err(Error::Config("fine window must span at least 2 coarse values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchEntry {
    pub young_modulus: f64,
    /// `None` when the run is N/A.
    pub mean_distance: Option<f64>,
    pub frames_used: usize,
    pub diverged_at_frame: Option<usize>,
    pub failure: Option<String>,
}

impl SearchEntry {
    pub fn is_na(&self) -> bool {
        self.mean_distance.is_none()
    }
}

/// Entries sorted by modulus.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchTable {
    pub entries: Vec<SearchEntry>,
}

impl SearchTable {
    /// Finite entry with the smallest distance (first on ties).
    pub fn argmin(&self) -> Option<&SearchEntry> {
        self.entries
            .iter()
            .filter(|e| e.mean_distance.is_some())
            .fold(None, |best: Option<&SearchEntry>, e| match best {
                Some(b) if b.mean_distance <= e.mean_distance => Some(b),
                _ => Some(e),
            })
    }

    /// Aligned table: a modulus row, a rule and a distance row.
    pub fn to_text(&self) -> String {
        let head: Vec<String> = self.entries.iter().map(|e| format!("{:e}", e.young_modulus)).collect();
        let vals: Vec<String> = self.entries.iter().map(|e| e.mean_distance.map_or("N/A".into(), |d| format!("{d:.4}"))).collect();
        let widths: Vec<usize> = head.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: &[String]| cells.iter().zip(&widths).map(|(c, w)| format!("{c:^w$}")).collect::<Vec<_>>().join(" | ");
        let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
        format!("{}\n{}\n{}\n", row(&head), rule, row(&vals))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub coarse: SearchTable,
    pub fine: SearchTable,
    pub selected: f64,
    pub warnings: Vec<String>,
}

impl SearchOutcome {
    /// `search_report.csv` and the aligned `search_report.txt`.
    pub fn write_reports(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut csv = String::from("stage,E,mean_distance_mm,frames_used,diverged_at_frame\n");
        for (stage, t) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for e in &t.entries {
                writeln!(
                    csv,
                    "{stage},{:e},{},{},{}",
                    e.young_modulus,
                    e.mean_distance.map_or("NA".into(), |d| format!("{d:.6}")),
                    e.frames_used,
                    e.diverged_at_frame.map_or("".into(), |f| f.to_string())
                )
                .unwrap();
            }
        }
        let p = dir.join("search_report.csv");
        std::fs::write(&p, csv).map_err(io_err(&p))?;
        let mut txt = String::from("Coarse search: mean distance (mm) from observed cloud to simulated surface\n\n");
        txt += &self.coarse.to_text();
        txt += "\nFine search\n\n";
        txt += &self.fine.to_text();
        writeln!(txt, "\nselected E = {:e}", self.selected).unwrap();
        for w in &self.warnings {
            writeln!(txt, "warning: {w}").unwrap();
        }
        let p = dir.join("search_report.txt");
        std::fs::write(&p, txt).map_err(io_err(&p))
    }
}

/// Content hash of everything that determines a run at modulus `e`.
pub fn cache_key(scene: &SearchScene, e: f64) -> String {
    let mut h = Sha256::new();
    let f = |h: &mut Sha256, x: f64| h.update(x.to_le_bytes());
    for d in scene.mesh.dims() {
        h.update((d as u64).to_le_bytes());
    }
    for v in scene.mesh.vertices() {
        v.iter().for_each(|&x| f(&mut h, x));
    }
    for t in scene.mesh.tets() {
        t.iter().for_each(|&i| h.update((i as u64).to_le_bytes()));
    }
    let m = &scene.base_material;
    [e, m.poisson_ratio, m.density].into_iter().for_each(|x| f(&mut h, x));
    let s = &scene.solver;
    [s.dt, s.rayleigh_mass, s.rayleigh_stiffness, s.cg_tolerance, s.cg_max_iters as f64, s.divergence_threshold]
        .into_iter()
        .for_each(|x| f(&mut h, x));
    let p = &scene.probe;
    [p.radius, p.contact_stiffness, p.min_contact_distance, p.contact_resolution as f64]
        .into_iter()
        .for_each(|x| f(&mut h, x));
    for (t, q) in scene.trajectory.samples() {
        f(&mut h, *t);
        q.iter().for_each(|&x| f(&mut h, x));
    }
    for (i, c) in &scene.observed {
        h.update((*i as u64).to_le_bytes());
        for q in c.points() {
            q.iter().for_each(|&x| f(&mut h, x));
        }
    }
    hex::encode(h.finalize())
}

/// Score stored frames against the observations.
pub fn score_frames(scene: &SearchScene, frames: &[(usize, f64, Vec<nalgebra::Vector3<f64>>)]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, cloud) in &scene.observed {
        if let Some((_, _, pos)) = frames.iter().find(|f| f.0 == *i) {
            sum += frame_distance(&scene.mesh, pos, cloud)?;
            n += 1;
        }
    }
    Ok((if n > 0 { sum / n as f64 } else { f64::NAN }, n))
}

fn read_meta(dir: &Path) -> Result<(Option<usize>, Option<String>)> {
    let p = dir.join("run_meta");
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut at = None;
    let mut failure = None;
    for l in text.lines() {
        if let Some((k, v)) = l.split_once('=') {
            match (k.trim(), v.trim()) {
                ("diverged_at_frame", "none") | ("failure", "none") => {}
                ("diverged_at_frame", v) => at = v.parse().ok(),
                ("failure", v) => failure = Some(v.to_string()),
                _ => {}
            }
        }
    }
    Ok((at, failure))
}

/// Replay the scene at modulus `e`, or reuse a cached run.
pub fn evaluate_modulus(scene: &SearchScene, e: f64, cache_dir: Option<&Path>) -> Result<SearchEntry> {
    let dir = cache_dir.map(|c| c.join(cache_key(scene, e)));
    let cached = dir.as_ref().is_some_and(|d| d.join("run_meta").exists());
    let (frames, diverged_at_frame, failure) = if cached {
        let d = dir.as_ref().expect("cached");
        let (at, failure) = read_meta(d)?;
        (read_run_dir::<f64>(d)?, at, failure)
    } else {
        let material = MaterialParams {
            young_modulus: e,
            ..scene.base_material
        };
        let mut sim = Simulation::new(scene.mesh.clone(), material, scene.solver)?;
        let schedule = scene.trajectory.frame_schedule(scene.frame_rate);
        let out = run_replay(&mut sim, &scene.probe, &scene.trajectory, &schedule)?;
        match &dir {
            Some(d) => {
                write_run_dir(d, &sim, &scene.probe, &out)?;
                (read_run_dir::<f64>(d)?, out.diverged_at_frame, out.failure)
            }
            None => {
                let frames = out
                    .present()
                    .map(|(f, p)| (f.frame_id, f.time, p.to_vec()))
                    .collect();
                (frames, out.diverged_at_frame, out.failure)
            }
        }
    };
    let (mean, n) = score_frames(scene, &frames)?;
    log::info!("E = {e:e}: {}", if diverged_at_frame.is_some() { "N/A".into() } else { format!("{mean:.4} mm") });
    Ok(SearchEntry {
        young_modulus: e,
        mean_distance: (diverged_at_frame.is_none() && n > 0).then_some(mean),
        frames_used: n,
        diverged_at_frame,
        failure,
    })
}

fn sweep(scene: &SearchScene, values: &[f64], cache_dir: Option<&Path>) -> Result<SearchTable> {
    let mut entries = values
        .par_iter()
        .map(|&e| evaluate_modulus(scene, e, cache_dir))
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.young_modulus.total_cmp(&b.young_modulus));
    Ok(SearchTable { entries })
}

/// Decade sweep. Fails if every run is N/A.
pub fn coarse_search(spec: &SearchSpec, scene: &SearchScene) -> Result<SearchTable> {
    spec.validate()?;
    let t = sweep(scene, &spec.coarse_values, spec.cache_dir.as_deref())?;
    if t.argmin().is_none() {
        return Err(Error::Search("every coarse run diverged".into()));
    }
    Ok(t)
}

/// Fine-stage moduli: the window of `fine_window` consecutive coarse values
/// that contains the coarse minimum and has the smallest summed distance
/// (N/A counts as infinite); each interval inside it is sampled at the given
/// fractions of its upper end.
pub fn fine_values(coarse: &SearchTable, spec: &SearchSpec) -> Result<Vec<f64>> {
    let best = coarse.argmin().ok_or_else(|| Error::Search("coarse table has no finite entry".into()))?;
    let vals: Vec<f64> = coarse.entries.iter().map(|e| e.mean_distance.unwrap_or(f64::INFINITY)).collect();
    let n = vals.len();
    let i = coarse.entries.iter().position(|e| std::ptr::eq(e, best)).expect("member");
    let w = spec.fine_window.min(n);
    let lo_start = i.saturating_sub(w - 1);
    let hi_start = i.min(n - w);
    let score = |s: usize| vals[s..s + w].iter().sum::<f64>();
    let start = (lo_start..=hi_start)
        .fold(None, |acc: Option<(usize, f64)>, s| {
            let v = score(s);
            match acc {
                Some((_, b)) if b <= v => acc,
                _ => Some((s, v)),
            }
        })
        .map_or(lo_start, |(s, _)| s);
    let mut out = Vec::new();
    for k in start..start + w - 1 {
        let (a, b) = (coarse.entries[k].young_modulus, coarse.entries[k + 1].young_modulus);
        for &f in &spec.fine_fractions {
            let e = f * b;
            if e > a && e < b {
                out.push(e);
            }
        }
    }
    Ok(out)
}

/// Warnings for a landscape that does not fall monotonically to its minimum
/// and rise monotonically after it, or that has a single finite entry.
pub fn landscape_warnings(table: &SearchTable) -> Vec<String> {
    let finite: Vec<(f64, f64)> = table.entries.iter().filter_map(|e| e.mean_distance.map(|d| (e.young_modulus, d))).collect();
    let mut w = Vec::new();
    if finite.len() == 1 {
        w.push(format!("only one finite entry (E = {:e})", finite[0].0));
        return w;
    }
    let Some(m) = finite.iter().enumerate().min_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).map(|(i, _)| i) else {
        return w;
    };
    for k in 1..finite.len() {
        let (prev, cur) = (finite[k - 1], finite[k]);
        let bad = if k <= m { cur.1 > prev.1 } else { cur.1 < prev.1 };
        if bad {
            w.push(format!("non-monotone landscape between E = {:e} ({:.4}) and E = {:e} ({:.4})", prev.0, prev.1, cur.0, cur.1));
        }
    }
    let na: Vec<String> = table.entries.iter().filter(|e| e.is_na()).map(|e| format!("{:e}", e.young_modulus)).collect();
    if !na.is_empty() {
        w.push(format!("runs without a result: {}", na.join(", ")));
    }
    w
}

/// Fine sweep and selection: argmin over the finite fine entries, falling
/// back to the coarse minimum when none is finite.
pub fn fine_search(coarse: &SearchTable, spec: &SearchSpec, scene: &SearchScene) -> Result<(SearchTable, f64, Vec<String>)> {
    let values = fine_values(coarse, spec)?;
    let fine = sweep(scene, &values, spec.cache_dir.as_deref())?;
    let mut warnings = landscape_warnings(&fine);
    let selected = match fine.argmin() {
        Some(e) => e.young_modulus,
        None => {
            warnings.push("no fine run finished; using the coarse minimum".into());
            coarse.argmin().expect("checked").young_modulus
        }
    };
    Ok((fine, selected, warnings))
}

pub fn run_search(spec: &SearchSpec, scene: &SearchScene) -> Result<SearchOutcome> {
    let coarse = coarse_search(spec, scene)?;
    let (fine, selected, warnings) = fine_search(&coarse, spec, scene)?;
    Ok(SearchOutcome {
        coarse,
        fine,
        selected,
        warnings,
    })
}
