use std::path::Path;
use std::process::{Command, Output};

use softcorr_core::dataset::modulus_label;
use softcorr_core::mesh::{build_grid_mesh, GridMeshSpec};
use softcorr_core::nalgebra::Vector3;
use softcorr_core::net::{CorrectionModel, Normalization, UNetConfig};

const TINY: &str = r#"
seed = 3

[mesh]
nodes = [6, 4, 3]
extents = [30.0, 20.0, 10.0]

[scene]
sequences = 4
pokes_per_sequence = 1
depth = [1.0, 2.0]
poke_duration = [0.3, 0.4]
noise_sigma = 0.2
density = 0.5
sim_young_moduli = [1e4, 1e1]

[training]
epochs = 1
frame_stride = 4

[search]
coarse_values = [1e2, 1e3, 1e4, 1e5]
"#;

fn softcorr(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_softcorr"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn hash_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("manifest hash")).expect("hash printed").to_string()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn gen_is_deterministic_and_splits() {
    let dir = setup();
    let a = softcorr(dir.path(), &["gen", "--config", "run.toml", "--seed", "7", "--out", "a"]);
    let b = softcorr(dir.path(), &["gen", "--config", "run.toml", "--seed", "7", "--out", "b"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(hash_line(&a), hash_line(&b));
    assert!(stdout(&a).contains("(1 train / 1 validation / 2 test)"));
    let c = softcorr(dir.path(), &["gen", "--config", "run.toml", "--seed", "8", "--out", "c"]);
    assert_ne!(hash_line(&a), hash_line(&c));
}

#[test]
fn thirteen_sequences_split_ten_one_two() {
    let dir = setup();
    let o = softcorr(
        dir.path(),
        &["gen", "--config", "run.toml", "--key", "scene.sequences=13", "--key", "scene.sim_young_moduli=[1e4]", "--key", "scene.poke_duration=[0.1, 0.1]"],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("(10 train / 1 validation / 2 test)"));
}

#[test]
fn missing_mesh_file_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[mesh]\nfile = \"absent_mesh.txt\"\n").unwrap();
    let o = softcorr(dir.path(), &["gen", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent_mesh.txt"));
}

#[test]
fn unknown_key_and_missing_prerequisites() {
    let dir = setup();
    let o = softcorr(dir.path(), &["gen", "--config", "run.toml", "--key", "scene.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = softcorr(dir.path(), &["eval", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing dataset"));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = softcorr(dir.path(), &["verify", "--draws", "20"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn zero_head_model_gives_zero_improvement() {
    let dir = setup();
    assert!(softcorr(dir.path(), &["gen", "--config", "run.toml"]).status.success());
    let o = softcorr(dir.path(), &["eval", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing trained model"));

    let mesh = build_grid_mesh(&GridMeshSpec::new([6, 4, 3], Vector3::new(30.0, 20.0, 10.0))).unwrap();
    for e in [1e4, 1e1] {
        let cfg = UNetConfig::for_mesh(&mesh, 2, 0.5).unwrap();
        let model = CorrectionModel::build(cfg, Normalization::for_mesh(&mesh), 1, true).unwrap();
        let p = dir.path().join("out/models/2d").join(modulus_label(e)).join("model.bin");
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        model.save(&p).unwrap();
    }
    for fb in ["none", "top-layer"] {
        let o = softcorr(dir.path(), &["eval", "--config", "run.toml", "--feedback", fb]);
        assert!(o.status.success());
        let csv = std::fs::read_to_string(dir.path().join("out/eval/eval_report.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "E,sequence,uncorrected_mm,corrected_2d_mm,improvement_2d_pct,corrected_3d_mm,improvement_3d_pct");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert_eq!(r[2], r[3]);
            assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
            assert_eq!((r[5], r[6]), ("NA", "NA"));
        }
    }
}

#[test]
fn search_train_eval_end_to_end() {
    let dir = setup();
    let d = dir.path();
    assert!(softcorr(d, &["gen", "--config", "run.toml"]).status.success());
    let o = softcorr(d, &["register", "--config", "run.toml"]);
    assert!(o.status.success());
    assert!(d.join("out/register/camera_to_sim.txt").exists());

    let o = softcorr(d, &["search", "--config", "run.toml"]);
    assert!(o.status.success());
    let selected = std::fs::read_to_string(d.join("out/search/selected.txt")).unwrap();
    let csv = std::fs::read_to_string(d.join("out/search/search_report.csv")).unwrap();
    assert!(csv.starts_with("stage,E,mean_distance_mm,frames_used,diverged_at_frame"));
    assert!(stdout(&o).contains("selected E"));
    let again = softcorr(d, &["search", "--config", "run.toml"]);
    assert_eq!(std::fs::read_to_string(d.join("out/search/search_report.csv")).unwrap(), csv);
    assert!(again.status.success());

    let o = softcorr(d, &["simulate", "--config", "run.toml", "--sequence", "seq01", "--modulus", selected.trim()]);
    assert!(o.status.success());

    for net in ["2d", "3d"] {
        let o = softcorr(d, &["train", "--config", "run.toml", "--net", net, "--modulus", "1e4"]);
        assert!(o.status.success());
        let curve = std::fs::read_to_string(d.join(format!("out/models/{net}/E1e4/loss_curve.csv"))).unwrap();
        assert!(curve.starts_with("epoch,train,val\n0,"));
    }
    let o = softcorr(d, &["train", "--config", "run.toml", "--net", "2d", "--modulus", "1e1"]);
    assert!(o.status.success());
    let o = softcorr(d, &["eval", "--config", "run.toml"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(d.join("out/eval/eval_report.txt")).unwrap();
    assert!(text.lines().next().unwrap().contains("no network"));
    let csv = std::fs::read_to_string(d.join("out/eval/eval_report.csv")).unwrap();
    let e4: Vec<&str> = csv.lines().filter(|l| l.starts_with("1e4,")).collect();
    assert_eq!(e4.len(), 2);
    assert!(e4.iter().all(|l| !l.ends_with("NA,NA")));
}
