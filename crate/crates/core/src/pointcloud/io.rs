//! ASCII cloud files: either plain `x y z` rows or an ASCII PLY with a
//! `vertex` element whose first three properties are the coordinates.
//! Sequences are numbered `frame_%06d.xyz` files plus a `frames.csv`
//! manifest of `frame_id,time`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloud;
use crate::error::{io_err, parse_err, Result};
use crate::mesh::sig9;
use crate::scalar::Real;

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    let mut s = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        writeln!(s, "{} {} {}", sig9(p.x), sig9(p.y), sig9(p.z)).unwrap();
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate().peekable();
    let mut expected: Option<usize> = None;
    if lines.peek().is_some_and(|(_, l)| l.trim() == "ply") {
        loop {
            let Some((_, line)) = lines.next() else {
                return Err(parse_err(path, "PLY header without end_header"));
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(parse_err(path, "only ASCII PLY is supported")),
                ["element", "vertex", n] => {
                    expected = Some(n.parse().map_err(|_| parse_err(path, "bad vertex count"))?);
                }
                ["end_header"] => break,
                _ => {}
            }
        }
    }
    let mut points = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if expected.is_some_and(|e| points.len() == e) {
            break;
        }
        let f: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, format!("line {}: `{line}`", n + 1)))?;
        if f.len() < 3 {
            return Err(parse_err(path, format!("line {}: expected x y z", n + 1)));
        }
        points.push(Vector3::new(T::lit(f[0]), T::lit(f[1]), T::lit(f[2])));
    }
    if let Some(e) = expected {
        if points.len() != e {
            return Err(parse_err(path, format!("header declares {e} vertices, found {}", points.len())));
        }
    }
    PointCloud::new(points).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_cloud_sequence<T: Real>(dir: &Path, frames: &[(usize, f64, PointCloud<T>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("frame_id,time\n");
    for (id, t, cloud) in frames {
        writeln!(manifest, "{id},{t:.9}").unwrap();
        write_cloud(&dir.join(format!("frame_{id:06}.xyz")), cloud)?;
    }
    let m = dir.join("frames.csv");
    std::fs::write(&m, manifest).map_err(io_err(&m))
}

pub fn read_cloud_sequence<T: Real>(dir: &Path) -> Result<Vec<(usize, f64, PointCloud<T>)>> {
    let m = dir.join("frames.csv");
    let text = std::fs::read_to_string(&m).map_err(io_err(&m))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, t) = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<f64>().ok()?)))
            .ok_or_else(|| parse_err(&m, format!("line {}: `{line}`", n + 1)))?;
        out.push((id, t, read_cloud(&dir.join(format!("frame_{id:06}.xyz")))?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_plain_and_ply() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a.xyz");
        std::fs::write(&plain, "1 2 3\n# comment\n4.5 -1 0\n").unwrap();
        let c: PointCloud<f64> = read_cloud(&plain).unwrap();
        assert_eq!(c.points(), &[Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.5, -1.0, 0.0)]);

        let ply = dir.path().join("a.ply");
        std::fs::write(
            &ply,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n4.5 -1 0\n",
        )
        .unwrap();
        let d: PointCloud<f64> = read_cloud(&ply).unwrap();
        assert_eq!(c, d);

        std::fs::write(&ply, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_cloud::<f64>(&ply).is_err());
    }

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<(usize, f64, PointCloud<f64>)> = (0..3)
            .map(|i| (i, i as f64 / 30.0, PointCloud::new(vec![Vector3::new(i as f64, 0.5, -0.25)]).unwrap()))
            .collect();
        write_cloud_sequence(dir.path(), &frames).unwrap();
        let back: Vec<(usize, f64, PointCloud<f64>)> = read_cloud_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-9);
            assert_eq!(a.2, b.2);
        }
    }
}
