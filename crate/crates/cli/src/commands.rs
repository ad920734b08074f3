use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use softcorr_core::dataset::{make_dataset, modulus_label, Dataset, Split};
use softcorr_core::fem::{run_replay, write_run_dir, Simulation};
use softcorr_core::metric::{frame_distance, top_surface};
use softcorr_core::net::{evaluate_rollout, train as train_model, CorrectionModel, Feedback, Normalization, TrainSample, UNetConfig};
use softcorr_core::registration::{fit_rigid, icp_register, read_correspondences, IcpConfig};
use softcorr_core::search::{run_search, SearchScene};

use crate::config::{parse_modulus, RunConfig};
use crate::{Common, UserError};

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.keys)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn config_dir(c: &Common) -> Option<&Path> {
    c.config.as_deref().and_then(Path::parent)
}

fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn model_path(cfg: &RunConfig, net: &str, e: f64) -> PathBuf {
    cfg.output_dir.join("models").join(net).join(modulus_label(e)).join("model.bin")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(UserError::new(format!("missing {what}: {} (run the earlier command first)", path.display())));
    }
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = dataset_dir(cfg);
    require(&root.join("manifest.txt"), "dataset")?;
    Ok(Dataset::open(&root)?)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
}

pub fn gen(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let mesh = cfg.build_mesh(config_dir(c))?;
    let spec = cfg.dataset_spec(&mesh)?;
    let root = dataset_dir(&cfg);
    let manifest = make_dataset(&mesh, &spec, &root)?;
    let counts = [Split::Train, Split::Validation, Split::Test].map(|s| manifest.sequences.iter().filter(|q| q.split == s).count());
    println!("dataset {} ({} train / {} validation / {} test)", root.display(), counts[0], counts[1], counts[2]);
    println!("manifest hash {}", manifest.hash());
    Ok(())
}

pub fn simulate(c: &Common, sequence: &str, modulus: Option<&str>) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = open_dataset(&cfg)?;
    let e = modulus.map(parse_modulus).transpose()?.unwrap_or(cfg.material.young_modulus);
    let traj = ds.trajectory(sequence).map_err(|err| UserError::new(err.to_string()))?;
    let schedule = traj.frame_schedule(ds.manifest.frame_rate);
    let mut sim = Simulation::new(ds.mesh.clone(), cfg.material(&ds.mesh, e), cfg.solver())?;
    let probe = cfg.probe();
    let out = run_replay(&mut sim, &probe, &traj, &schedule)?;
    let dir = cfg.output_dir.join("simulate").join(sequence).join(modulus_label(e));
    write_run_dir(&dir, &sim, &probe, &out)?;
    let obs = ds.observations(sequence)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (f, pos) in out.present() {
        if let Some((_, _, cloud)) = obs.iter().find(|o| o.0 == f.frame_id) {
            sum += frame_distance(&ds.mesh, pos, cloud)?;
            n += 1;
        }
    }
    match out.diverged_at_frame {
        Some(k) => println!("{sequence} E={e:e}: N/A (diverged at frame {k}); run written to {}", dir.display()),
        None => println!("{sequence} E={e:e}: mean distance {:.4} mm over {n} frames; run written to {}", sum / n.max(1) as f64, dir.display()),
    }
    Ok(())
}

pub fn register(c: &Common, sequence: Option<&str>) -> Result<()> {
    let cfg = load_config(c)?;
    let root = dataset_dir(&cfg);
    let corr = root.join("registration.csv");
    require(&corr, "fiducial correspondences")?;
    let (sim_pts, cam_pts) = read_correspondences::<f64>(&corr)?;
    let fitted = fit_rigid(&cam_pts, &sim_pts)?;
    let residual = cam_pts.iter().zip(&sim_pts).map(|(a, b)| (fitted.apply(a) - b).norm()).fold(0.0, f64::max);
    let dir = cfg.output_dir.join("register");
    mkdir(&dir)?;
    fitted.write(&dir.join("camera_to_sim.txt"))?;
    println!("fiducial fit: max residual {residual:.3e} mm");
    let ds = open_dataset(&cfg)?;
    let name = match sequence {
        Some(s) => s.to_string(),
        None => ds.manifest.sequences.first().map(|q| q.name.clone()).context("dataset has no sequences")?,
    };
    let clouds = softcorr_core::pointcloud::read_cloud_sequence::<f64>(&root.join(&name).join("clouds"))?;
    let (_, _, first) = clouds.first().with_context(|| format!("{name} has no clouds"))?;
    let target = top_surface(&ds.mesh, ds.mesh.vertices())?.cloud();
    let icp = icp_register(first, &target, &IcpConfig::new(fitted.clone()))?;
    icp.transform.write(&dir.join("camera_to_sim_icp.txt"))?;
    let shift = (icp.transform.translation - fitted.translation).norm();
    println!("ICP on {name} frame 0: rms residual {:.4} mm after {} iterations, translation change {shift:.4} mm", icp.mean_residual, icp.iterations);
    Ok(())
}

fn search_scene(cfg: &RunConfig, ds: &Dataset) -> Result<SearchScene> {
    let name = if cfg.search.sequence.is_empty() {
        ds.names(Split::Train).into_iter().next().context("dataset has no training sequence")?
    } else {
        cfg.search.sequence.clone()
    };
    let trajectory = ds.trajectory(&name).map_err(|err| UserError::new(err.to_string()))?;
    let observed = ds.observations(&name)?.into_iter().map(|(i, _, c)| (i, c)).collect();
    Ok(SearchScene {
        mesh: ds.mesh.clone(),
        base_material: cfg.material(&ds.mesh, cfg.material.young_modulus),
        solver: cfg.solver(),
        probe: cfg.probe(),
        trajectory,
        frame_rate: ds.manifest.frame_rate,
        observed,
    })
}

pub fn search(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = open_dataset(&cfg)?;
    let scene = search_scene(&cfg, &ds)?;
    let outcome = run_search(&cfg.search_spec(), &scene)?;
    let dir = cfg.output_dir.join("search");
    outcome.write_reports(&dir)?;
    println!("coarse\n{}", outcome.coarse.to_text());
    println!("fine\n{}", outcome.fine.to_text());
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    println!("selected E = {:e} Pa", outcome.selected);
    std::fs::write(dir.join("selected.txt"), format!("{:e}\n", outcome.selected))?;
    Ok(())
}

fn samples(ds: &Dataset, split: Split, e: f64, stride: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for name in ds.names(split) {
        for f in ds.load_sequence(&name, e)?.frames.into_iter().step_by(stride.max(1)) {
            out.push(TrainSample {
                sim: f.sim,
                probe: f.probe,
                observed: f.observed,
            });
        }
    }
    Ok(out)
}

fn net_dim(net: &str) -> usize {
    if net == "3d" {
        3
    } else {
        2
    }
}

pub fn train(c: &Common, net: &str, modulus: &str) -> Result<()> {
    let cfg = load_config(c)?;
    let e = parse_modulus(modulus)?;
    let ds = open_dataset(&cfg)?;
    if !ds.manifest.sim_materials.iter().any(|m| m.young_modulus == e) {
        bail!(UserError::new(format!("dataset has no simulated run at E = {e:e}")));
    }
    let train_set = samples(&ds, Split::Train, e, cfg.training.frame_stride)?;
    let val_set = samples(&ds, Split::Validation, e, cfg.training.frame_stride)?;
    let mcfg = UNetConfig::for_mesh(&ds.mesh, net_dim(net), cfg.network.clamp_fraction)?;
    let mut model = CorrectionModel::build(mcfg, Normalization::for_mesh(&ds.mesh), cfg.seed, true)?;
    log::info!("training {net} network at E={e:e} on {} frames, validating on {}", train_set.len(), val_set.len());
    let report = train_model(&mut model, &ds.mesh, &train_set, &val_set, &cfg.train_config())?;
    let path = model_path(&cfg, net, e);
    mkdir(path.parent().expect("has parent"))?;
    model.save(&path)?;
    report.write_csv(&path.with_file_name("loss_curve.csv"))?;
    let (_, t, v) = report.curve[report.best_epoch];
    println!("best epoch {} (train {t:.4} mm, validation {v:.4} mm); model written to {}", report.best_epoch, path.display());
    Ok(())
}

struct EvalRow {
    e: f64,
    sequence: String,
    uncorrected: Option<f64>,
    corrected: [Option<f64>; 2],
}

fn pct(u: Option<f64>, c: Option<f64>) -> Option<f64> {
    Some(100.0 * (u? - c?) / u?)
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map_or("NA".into(), |x| format!("{x:.prec$}"))
}

pub fn eval(c: &Common, feedback: &str) -> Result<()> {
    let cfg = load_config(c)?;
    let feedback: Feedback = feedback.parse()?;
    let ds = open_dataset(&cfg)?;
    let moduli: Vec<f64> = ds.manifest.sim_materials.iter().map(|m| m.young_modulus).collect();
    let mut models: Vec<[Option<CorrectionModel>; 2]> = Vec::new();
    for &e in &moduli {
        let mut pair = [None, None];
        for (k, net) in ["2d", "3d"].iter().enumerate() {
            let p = model_path(&cfg, net, e);
            if p.exists() {
                pair[k] = Some(CorrectionModel::load(&p)?);
            }
        }
        if pair.iter().all(Option::is_none) {
            require(&model_path(&cfg, "2d", e), "trained model")?;
        }
        models.push(pair);
    }
    let mut rows = Vec::new();
    for (&e, pair) in moduli.iter().zip(&models) {
        for name in ds.names(Split::Test) {
            let seq = ds.load_sequence(&name, e)?;
            let mut row = EvalRow {
                e,
                sequence: name.clone(),
                uncorrected: None,
                corrected: [None, None],
            };
            if seq.sim_na.is_some() {
                rows.push(row);
                continue;
            }
            for (k, model) in pair.iter().enumerate() {
                let Some(model) = model else { continue };
                let (u, cr) = match feedback {
                    Feedback::None => {
                        let (mut u, mut cr) = (0.0, 0.0);
                        for f in &seq.frames {
                            u += frame_distance(&ds.mesh, &f.sim, &f.observed)?;
                            cr += frame_distance(&ds.mesh, &model.correct(&ds.mesh, &f.sim, &f.probe)?, &f.observed)?;
                        }
                        let n = seq.frames.len() as f64;
                        (u / n, cr / n)
                    }
                    Feedback::TopLayer => {
                        let mut sim = Simulation::new(ds.mesh.clone(), cfg.material(&ds.mesh, e), cfg.solver())?;
                        let schedule = seq.trajectory.frame_schedule(ds.manifest.frame_rate);
                        let obs: Vec<_> = seq.observed.iter().map(|(i, _, c)| (*i, c.clone())).collect();
                        let r = evaluate_rollout(model, &mut sim, &cfg.probe(), &seq.trajectory, &schedule, &obs, feedback)?;
                        if let Some(d) = r.diverged_at_frame {
                            log::warn!("{name} E={e:e}: rollout lost frames from {d}");
                        }
                        (r.mean_uncorrected, r.mean_corrected)
                    }
                };
                row.uncorrected = Some(u);
                row.corrected[k] = Some(cr);
            }
            rows.push(row);
        }
    }
    let dir = cfg.output_dir.join("eval");
    mkdir(&dir)?;
    let mut csv = String::from("E,sequence,uncorrected_mm,corrected_2d_mm,improvement_2d_pct,corrected_3d_mm,improvement_3d_pct\n");
    let header = ["E", "sequence", "no network", "2D", "improvement", "3D", "improvement"].map(String::from);
    let mut table = vec![header.to_vec()];
    for r in &rows {
        let [c2, c3] = r.corrected;
        let vals = [
            format!("{:e}", r.e),
            r.sequence.clone(),
            cell(r.uncorrected, 4),
            cell(c2, 4),
            cell(pct(r.uncorrected, c2), 1),
            cell(c3, 4),
            cell(pct(r.uncorrected, c3), 1),
        ];
        writeln!(csv, "{}", vals.join(","))?;
        let mut t = vals.to_vec();
        for k in [4, 6] {
            if t[k] != "NA" {
                t[k] += "%";
            }
        }
        table.push(t);
    }
    std::fs::write(dir.join("eval_report.csv"), &csv)?;
    let text = aligned(&table);
    std::fs::write(dir.join("eval_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Right-aligned columns separated by two spaces.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|j| rows.iter().filter_map(|r| r.get(j)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        s += line.join("  ").trim_end();
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_pads_columns() {
        let t = aligned(&[vec!["a".into(), "bbb".into()], vec!["cc".into(), "d".into()]]);
        assert_eq!(t, " a  bbb\ncc    d\n");
    }

    #[test]
    fn improvement_needs_both_values() {
        assert_eq!(pct(Some(2.0), Some(1.5)), Some(25.0));
        assert_eq!(pct(None, Some(1.0)), None);
        assert_eq!(cell(None, 3), "NA");
    }
}
