use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::sim::{FemState, ProbeSphere, Simulation};
use crate::error::{io_err, parse_err, Error, Result};
use crate::mesh::sig9;
use crate::scalar::Real;
use crate::sync::{FrameSchedule, KinematicsTrajectory};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayFrame<T: Real> {
    pub frame_id: usize,
    pub time: T,
    /// `None` once the run has diverged.
    pub positions: Option<Vec<Vector3<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutput<T: Real> {
    pub frames: Vec<ReplayFrame<T>>,
    /// First frame that could not be produced.
    pub diverged_at_frame: Option<usize>,
    /// Why the run stopped early.
    pub failure: Option<String>,
    pub steps: usize,
}

impl<T: Real> ReplayOutput<T> {
    /// The run did not complete: report as N/A rather than as a distance.
    pub fn is_na(&self) -> bool {
        self.diverged_at_frame.is_some()
    }

    pub fn present(&self) -> impl Iterator<Item = (&ReplayFrame<T>, &[Vector3<T>])> {
        self.frames.iter().filter_map(|f| f.positions.as_deref().map(|p| (f, p)))
    }
}

/// Step index whose end time is closest to `t`.
fn step_index<T: Real>(t: T, start: T, dt: T) -> usize {
    let k = ((t - start) / dt).round().as_f64();
    if k <= 0.0 {
        0
    } else {
        k as usize
    }
}

/// Replay `trajectory` through `sim`: the probe centre is interpolated at the
/// end of every substep and vertex positions are recorded at the substep
/// nearest each scheduled frame time. Divergence and solver failures end the
/// run, leaving later frames absent.
pub fn run_replay<T: Real>(
    sim: &mut Simulation<T>,
    probe_template: &ProbeSphere<T>,
    trajectory: &KinematicsTrajectory<T>,
    schedule: &FrameSchedule<T>,
) -> Result<ReplayOutput<T>> {
    run_replay_with(sim, probe_template, trajectory, schedule, |_, _| Ok(()))
}

/// As [`run_replay`], calling `on_frame(frame index, state)` at every
/// recorded frame before the positions are stored. Changes the hook makes to
/// the state carry into the following substeps.
pub fn run_replay_with<T: Real>(
    sim: &mut Simulation<T>,
    probe_template: &ProbeSphere<T>,
    trajectory: &KinematicsTrajectory<T>,
    schedule: &FrameSchedule<T>,
    on_frame: impl FnMut(usize, &mut FemState<T>) -> Result<()>,
) -> Result<ReplayOutput<T>> {
    let initial = sim.rest_state();
    run_replay_from(sim, probe_template, trajectory, schedule, initial, on_frame)
}

/// As [`run_replay_with`], starting from `initial` instead of rest. The
/// state's time is reset to the trajectory start.
pub fn run_replay_from<T: Real>(
    sim: &mut Simulation<T>,
    probe_template: &ProbeSphere<T>,
    trajectory: &KinematicsTrajectory<T>,
    schedule: &FrameSchedule<T>,
    initial: FemState<T>,
    mut on_frame: impl FnMut(usize, &mut FemState<T>) -> Result<()>,
) -> Result<ReplayOutput<T>> {
    if trajectory.is_empty() {
        return Err(Error::Argument("empty trajectory".into()));
    }
    schedule.validate_within(trajectory)?;
    probe_template.validate()?;
    sim.reset_warm_start();
    let dt = sim.solver().dt;
    let start = trajectory.start();
    let targets: Vec<usize> = schedule.frame_times.iter().map(|&t| step_index(t, start, dt)).collect();
    let mut frames: Vec<ReplayFrame<T>> = schedule
        .frame_times
        .iter()
        .enumerate()
        .map(|(i, &t)| ReplayFrame {
            frame_id: i,
            time: t,
            positions: None,
        })
        .collect();
    if initial.positions.len() != sim.mesh().vertex_count() || initial.velocities.len() != sim.mesh().vertex_count() {
        return Err(Error::Shape("initial state does not match the mesh".into()));
    }
    let mut state = FemState { time: start, ..initial };
    let mut next = 0;
    let mut step = 0usize;
    let mut failure = None;
    let last = targets.last().copied().unwrap_or(0);
    loop {
        while next < targets.len() && targets[next] == step {
            on_frame(next, &mut state)?;
            frames[next].positions = Some(state.positions.clone());
            next += 1;
        }
        if step >= last {
            break;
        }
        let t = start + T::from_usize_lossy(step + 1) * dt;
        let probe = ProbeSphere {
            center: trajectory.interpolate(t),
            ..*probe_template
        };
        match sim.step(&state, &probe) {
            Ok(mut s) => {
                s.time = t;
                state = s;
                step += 1;
                if state.diverged {
                    failure = Some(format!("diverged at t = {:.4} s", t.as_f64()));
                    break;
                }
            }
            Err(e @ Error::Solver { .. }) => {
                failure = Some(format!("{e} at t = {:.4} s", t.as_f64()));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ReplayOutput {
        diverged_at_frame: (next < frames.len()).then_some(next),
        frames,
        failure,
        steps: step,
    })
}

/// Write `frames.csv`, one `frame_%06d.txt` per present frame and `run_meta`.
pub fn write_run_dir<T: Real>(dir: &Path, sim: &Simulation<T>, probe: &ProbeSphere<T>, out: &ReplayOutput<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("frame_id,time\n");
    for (f, pos) in out.present() {
        writeln!(manifest, "{},{:.9}", f.frame_id, f.time.as_f64()).unwrap();
        let mut s = String::with_capacity(pos.len() * 48);
        for p in pos {
            writeln!(s, "{} {} {}", sig9(p.x), sig9(p.y), sig9(p.z)).unwrap();
        }
        let path = dir.join(format!("frame_{:06}.txt", f.frame_id));
        std::fs::write(&path, s).map_err(io_err(&path))?;
    }
    let path = dir.join("frames.csv");
    std::fs::write(&path, manifest).map_err(io_err(&path))?;

    let m = sim.material();
    let c = sim.solver();
    let mut meta = String::new();
    let mut kv = |k: &str, v: String| writeln!(meta, "{k} = {v}").unwrap();
    kv("young_modulus", m.young_modulus.to_string());
    kv("poisson_ratio", m.poisson_ratio.to_string());
    kv("density", m.density.to_string());
    kv("dt", c.dt.to_string());
    kv("rayleigh_mass", c.rayleigh_mass.to_string());
    kv("rayleigh_stiffness", c.rayleigh_stiffness.to_string());
    kv("cg_tolerance", c.cg_tolerance.to_string());
    kv("cg_max_iters", c.cg_max_iters.to_string());
    kv("divergence_threshold", c.divergence_threshold.to_string());
    kv("probe_radius", probe.radius.to_string());
    kv("contact_stiffness", probe.contact_stiffness.to_string());
    kv("min_contact_distance", probe.min_contact_distance.to_string());
    kv("steps", out.steps.to_string());
    kv("frames", out.frames.len().to_string());
    kv("diverged", out.is_na().to_string());
    kv("diverged_at_frame", out.diverged_at_frame.map_or("none".into(), |f| f.to_string()));
    kv("failure", out.failure.clone().unwrap_or_else(|| "none".into()));
    let path = dir.join("run_meta");
    std::fs::write(&path, meta).map_err(io_err(&path))
}

/// Read the present frames of a run directory.
pub fn read_run_dir<T: Real>(dir: &Path) -> Result<Vec<(usize, f64, Vec<Vector3<T>>)>> {
    let path = dir.join("frames.csv");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let (id, t) = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<f64>().ok()?)))
            .ok_or_else(|| parse_err(&path, format!("line {}: `{line}`", n + 1)))?;
        let fp = dir.join(format!("frame_{id:06}.txt"));
        let body = std::fs::read_to_string(&fp).map_err(io_err(&fp))?;
        let mut pts = Vec::new();
        for (ln, l) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(&fp, format!("line {}", ln + 1)))?;
            if v.len() != 3 {
                return Err(parse_err(&fp, format!("line {} needs 3 values", ln + 1)));
            }
            pts.push(Vector3::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2])));
        }
        out.push((id, t, pts));
    }
    Ok(out)
}
