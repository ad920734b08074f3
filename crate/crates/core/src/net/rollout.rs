use nalgebra::Vector3;

use super::CorrectionModel;
use crate::error::{Error, Result};
use crate::fem::{run_replay, run_replay_with, ProbeSphere, Simulation};
use crate::metric::frame_distance;
use crate::pointcloud::PointCloud;
use crate::sync::{FrameSchedule, KinematicsTrajectory};

/// Whether corrected top-layer positions are written back into the FEM state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feedback {
    None,
    TopLayer,
}

impl std::str::FromStr for Feedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Feedback::None),
            "top-layer" => Ok(Feedback::TopLayer),
            _ => Err(Error::Argument(format!("feedback must be none or top-layer, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutFrame {
    pub frame_id: usize,
    pub uncorrected: f64,
    pub corrected: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub frames: Vec<RolloutFrame>,
    /// First frame lost to FEM divergence in either run.
    pub diverged_at_frame: Option<usize>,
    pub mean_uncorrected: f64,
    pub mean_corrected: f64,
}

impl RolloutReport {
    /// Relative reduction of the mean distance, in percent.
    pub fn improvement_pct(&self) -> f64 {
        100.0 * (self.mean_uncorrected - self.mean_corrected) / self.mean_uncorrected
    }
}

/// Replay the FEM and score plain and corrected meshes against each labelled
/// frame. `observed` holds `(frame index, cloud)` pairs in the simulation
/// frame. With [`Feedback::TopLayer`] the corrected run is a second replay
/// whose top layer is overwritten at every frame (velocities kept).
pub fn evaluate_rollout(
    model: &CorrectionModel,
    sim: &mut Simulation<f64>,
    probe: &ProbeSphere<f64>,
    trajectory: &KinematicsTrajectory<f64>,
    schedule: &FrameSchedule<f64>,
    observed: &[(usize, PointCloud<f64>)],
    feedback: Feedback,
) -> Result<RolloutReport> {
    let mesh = sim.mesh().clone();
    let clouds: std::collections::HashMap<usize, &PointCloud<f64>> = observed.iter().map(|(i, c)| (*i, c)).collect();
    let probe_at = |frame: usize| -> Vector3<f64> { trajectory.interpolate(schedule.frame_times[frame]) };

    let plain = run_replay(sim, probe, trajectory, schedule)?;
    let mut scores: std::collections::BTreeMap<usize, (f64, f64)> = std::collections::BTreeMap::new();
    for (f, pos) in plain.present() {
        let Some(cloud) = clouds.get(&f.frame_id) else { continue };
        let u = frame_distance(&mesh, pos, cloud)?;
        let c = match feedback {
            Feedback::None => frame_distance(&mesh, &model.correct(&mesh, pos, &probe_at(f.frame_id))?, cloud)?,
            Feedback::TopLayer => f64::NAN,
        };
        scores.insert(f.frame_id, (u, c));
    }
    let mut diverged = plain.diverged_at_frame;
    if feedback == Feedback::TopLayer {
        let fed = run_replay_with(sim, probe, trajectory, schedule, |frame, state| {
            let corrected = model.correct(&mesh, &state.positions, &probe_at(frame))?;
            if let Some(cloud) = clouds.get(&frame) {
                if let Some(s) = scores.get_mut(&frame) {
                    s.1 = frame_distance(&mesh, &corrected, cloud)?;
                }
            }
            state.positions = corrected;
            Ok(())
        })?;
        diverged = match (diverged, fed.diverged_at_frame) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        if let Some(d) = fed.diverged_at_frame {
            scores.retain(|&f, _| f < d);
        }
    }
    let frames: Vec<RolloutFrame> = scores
        .into_iter()
        .map(|(frame_id, (uncorrected, corrected))| RolloutFrame {
            frame_id,
            uncorrected,
            corrected,
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::Argument("no labelled frame was simulated".into()));
    }
    let n = frames.len() as f64;
    Ok(RolloutReport {
        mean_uncorrected: frames.iter().map(|f| f.uncorrected).sum::<f64>() / n,
        mean_corrected: frames.iter().map(|f| f.corrected).sum::<f64>() / n,
        frames,
        diverged_at_frame: diverged,
    })
}
