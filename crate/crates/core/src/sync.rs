//! Time-stamped probe kinematics: frame-rate subsampling and linear
//! interpolation for simulation substeps.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{io_err, parse_err, Error, Result};
use crate::scalar::Real;

/// Probe-centre positions (mm) at strictly increasing times (s).
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicsTrajectory<T: Real> {
    samples: Vec<(T, Vector3<T>)>,
}

impl<T: Real> KinematicsTrajectory<T> {
    pub fn new(samples: Vec<(T, Vector3<T>)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("trajectory has no samples".into()));
        }
        if let Some(i) = samples.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Argument(format!("timestamps not strictly increasing at sample {}", i + 1)));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(T, Vector3<T>)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> T {
        self.samples[0].0
    }

    pub fn end(&self) -> T {
        self.samples[self.samples.len() - 1].0
    }

    pub fn span(&self) -> T {
        self.end() - self.start()
    }

    /// Position at `t`, linear between bracketing samples and clamped to the
    /// end samples outside the recorded span.
    pub fn interpolate(&self, t: T) -> Vector3<T> {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        // first sample strictly after t
        let hi = s.partition_point(|(ts, _)| *ts <= t);
        let (t0, p0) = s[hi - 1];
        let (t1, p1) = s[hi];
        let w = (t - t0) / (t1 - t0);
        p0 + (p1 - p0) * w
    }

    /// Resample at `start + k / rate` for `k = 0..=floor(span * rate)`,
    /// taking the sample with the nearest timestamp (earlier one on ties).
    pub fn subsample_to_frames(&self, rate: T) -> Result<Self> {
        if !(rate > T::zero()) {
            return Err(Error::Argument("frame rate must be positive".into()));
        }
        let t0 = self.start();
        let frames = (self.span() * rate + T::lit(1e-9)).floor().as_f64() as usize + 1;
        let s = &self.samples;
        let mut out = Vec::with_capacity(frames);
        let mut cursor = 0usize;
        for k in 0..frames {
            let t = t0 + T::from_usize_lossy(k) / rate;
            while cursor + 1 < s.len() && s[cursor + 1].0 <= t {
                cursor += 1;
            }
            let pick = if cursor + 1 < s.len() && (s[cursor + 1].0 - t) < (t - s[cursor].0) {
                cursor + 1
            } else {
                cursor
            };
            out.push((t, s[pick].1));
        }
        Self::new(out)
    }

    /// Frame times of this trajectory as a schedule.
    pub fn frame_schedule(&self, rate: T) -> FrameSchedule<T> {
        FrameSchedule {
            frame_times: self.samples.iter().map(|s| s.0).collect(),
            frame_rate: rate,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("t,x,y,z\n");
        for (t, p) in &self.samples {
            writeln!(s, "{:.9},{:.9},{:.9},{:.9}", t.as_f64(), p.x.as_f64(), p.y.as_f64(), p.z.as_f64()).unwrap();
        }
        std::fs::write(path, s).map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
        if header != ["t", "x", "y", "z"] {
            return Err(parse_err(path, "expected header t,x,y,z"));
        }
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(path, format!("row {}: `{line}`", n + 1)))?;
            if v.len() != 4 {
                return Err(parse_err(path, format!("row {} has {} columns", n + 1, v.len())));
            }
            samples.push((T::lit(v[0]), Vector3::new(T::lit(v[1]), T::lit(v[2]), T::lit(v[3]))));
        }
        Self::new(samples).map_err(|e| parse_err(path, e.to_string()))
    }
}

/// Times at which simulation output is recorded (one per camera frame).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSchedule<T: Real> {
    pub frame_times: Vec<T>,
    pub frame_rate: T,
}

impl<T: Real> FrameSchedule<T> {
    pub fn validate_within(&self, traj: &KinematicsTrajectory<T>) -> Result<()> {
        if self.frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("frame times must be strictly increasing".into()));
        }
        let eps = T::lit(1e-9);
        if self.frame_times.iter().any(|&t| t < traj.start() - eps || t > traj.end() + eps) {
            return Err(Error::Argument("frame time outside the trajectory span".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point() -> KinematicsTrajectory<f64> {
        KinematicsTrajectory::new(vec![(0.0, Vector3::new(0.0, 0.0, 0.0)), (1.0, Vector3::new(2.0, -4.0, 6.0))]).unwrap()
    }

    #[test]
    fn interpolation_cases() {
        let tr = two_point();
        assert_eq!(tr.interpolate(0.0), Vector3::zeros());
        assert_eq!(tr.interpolate(1.0), Vector3::new(2.0, -4.0, 6.0));
        assert_eq!(tr.interpolate(0.5), Vector3::new(1.0, -2.0, 3.0));
        assert_eq!(tr.interpolate(7.0), Vector3::new(2.0, -4.0, 6.0));
        assert_eq!(tr.interpolate(-1.0), Vector3::zeros());
    }

    #[test]
    fn subsample_by_hand() {
        let tr = two_point();
        let s = tr.subsample_to_frames(2.0).unwrap();
        let t: Vec<f64> = s.samples().iter().map(|x| x.0).collect();
        assert_eq!(t, vec![0.0, 0.5, 1.0]);
        // t = 0.5 is equidistant; the earlier sample is kept
        assert_eq!(s.samples()[1].1, Vector3::zeros());
        assert_eq!(s.samples()[2].1, Vector3::new(2.0, -4.0, 6.0));
    }

    #[test]
    fn fourteen_minutes_at_kilohertz() {
        let n = 14 * 60 * 1000 + 1;
        let samples = (0..n).map(|i| (i as f64 / 1000.0, Vector3::new(1.0, 2.0, 3.0))).collect();
        let tr = KinematicsTrajectory::new(samples).unwrap();
        let s = tr.subsample_to_frames(30.0).unwrap();
        assert_eq!(s.len(), 25_201);
        assert!(s.samples().iter().all(|x| x.1 == Vector3::new(1.0, 2.0, 3.0)));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(KinematicsTrajectory::<f64>::new(vec![]).is_err());
        assert!(KinematicsTrajectory::new(vec![(1.0, Vector3::zeros()), (1.0, Vector3::zeros())]).is_err());
        assert!(two_point().subsample_to_frames(0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        two_point().write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("t,x,y,z\n"));
        assert_eq!(KinematicsTrajectory::<f64>::read_csv(&p).unwrap(), two_point());
    }

    proptest! {
        #[test]
        fn interpolant_lies_on_bracketing_segment(
            steps in prop::collection::vec((0.01f64..1.0, -10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 2..20),
            frac in 0.0f64..1.0,
        ) {
            let mut t = 0.0;
            let samples: Vec<_> = steps.iter().map(|&(dt, x, y, z)| { t += dt; (t, Vector3::new(x, y, z)) }).collect();
            let tr = KinematicsTrajectory::new(samples.clone()).unwrap();
            let q = tr.start() + frac * tr.span();
            let p = tr.interpolate(q);
            let hi = samples.iter().position(|s| s.0 > q).unwrap_or(samples.len() - 1).max(1);
            let (a, b) = (samples[hi - 1].1, samples[hi].1);
            let seg = b - a;
            let w = if seg.norm() > 0.0 { (p - a).dot(&seg) / seg.norm_squared() } else { 0.0 };
            prop_assert!(w >= -1e-12 && w <= 1.0 + 1e-12);
            prop_assert!((a + seg * w - p).norm() < 1e-12);
        }

        #[test]
        fn subsampling_is_idempotent(
            n in 2usize..400, rate in 1.0f64..60.0, seed in 0u64..1000,
        ) {
            let samples: Vec<_> = (0..n).map(|i| {
                let t = i as f64 / 1000.0;
                (t, Vector3::new((seed as f64 + t).sin(), t, 1.0))
            }).collect();
            let tr = KinematicsTrajectory::new(samples).unwrap();
            let once = tr.subsample_to_frames(rate).unwrap();
            let twice = once.subsample_to_frames(rate).unwrap();
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.samples().iter().zip(twice.samples()) {
                prop_assert!((a.0 - b.0).abs() < 1e-12);
                prop_assert_eq!(a.1, b.1);
            }
        }
    }
}
