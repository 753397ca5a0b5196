use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deblursplat::alignment::PointMap;
use deblursplat::geometry::{CameraIntrinsics, RigidTransform};
use deblursplat::io::{self, PointMapRecord};
use nalgebra::{Matrix3, Vector3};

const TINY_SPEC: &str = "gaussians = 30\nwidth = 32\nheight = 24\nviews = 3\nu = 4\nfocal = 32\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deblursplat")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn generate_tiny(dir: &Path, name: &str, seed: &str) {
    fs::write(dir.join("spec.toml"), TINY_SPEC).unwrap();
    ok(dir, &["generate", "--config", "spec.toml", "--seed", seed, "--out", name]);
}

#[test]
fn generate_is_deterministic_given_seed() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "a", "3");
    generate_tiny(tmp.path(), "b", "3");
    generate_tiny(tmp.path(), "c", "4");
    let (a, b, c) = (tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")), tree_bytes(&tmp.path().join("c")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn decouple_without_threshold_reproduces_the_blur() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "ds", "0");
    let view = "ds/views/view_001";
    ok(tmp.path(), &["decouple", "--blur", &format!("{view}/blur.pfm"), "--events", &format!("{view}/events.bin"), "--u", "4", "--theta", "0", "--out", "lat"]);
    let blur = fs::read(tmp.path().join(view).join("blur.pfm")).unwrap();
    for k in 0..=4 {
        assert_eq!(fs::read(tmp.path().join(format!("lat/latent_{k:02}.pfm"))).unwrap(), blur, "latent {k}");
    }
}

#[test]
fn simulate_events_writes_csv_and_binary_with_equal_content() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "ds", "0");
    ok(tmp.path(), &["simulate-events", "--frames", "ds/views/view_000", "--exposure-us", "1000", "--out", "ev.csv"]);
    ok(tmp.path(), &["simulate-events", "--frames", "ds/views/view_000", "--exposure-us", "1000", "--out", "ev.bin"]);
    let csv = io::read_events_csv(tmp.path().join("ev.csv")).unwrap();
    let bin = io::read_events_bin(tmp.path().join("ev.bin")).unwrap().events;
    assert!(!csv.is_empty());
    assert_eq!(csv, bin);
    assert!(fs::read_to_string(tmp.path().join("ev.csv")).unwrap().starts_with("x,y,t_us,p\n"));
}

#[test]
fn sample_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "ds", "0");
    for (name, seed) in [("a.ply", "7"), ("b.ply", "7")] {
        ok(tmp.path(), &["sample", "--cloud", "ds/points.ply", "--count", "100", "--intervals", "10", "--seed", seed, "--out", name]);
    }
    let a = fs::read(tmp.path().join("a.ply")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b.ply")).unwrap());
    assert_eq!(io::read_point_cloud_ply(tmp.path().join("a.ply")).unwrap().len(), 100);
}

#[test]
fn evaluate_on_identical_trajectories_prints_zero_ate() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "ds", "0");
    let stdout = ok(tmp.path(), &["evaluate", "--estimate", "ds/trajectory_gt.tum", "--reference", "ds/trajectory_gt.tum", "--label", "same"]);
    let row = stdout.lines().find(|l| l.starts_with("same,")).unwrap();
    let ate: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(ate, 0.0);
    assert_eq!(fs::read_to_string(tmp.path().join("metrics.csv")).unwrap(), format!("label,psnr_db,ssim,lpips,ate_rmse\n{row}\n"));
}

#[test]
fn align_recovers_focal_of_a_noiseless_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let intr = CameraIntrinsics::new(40.0, 24, 18).unwrap();
    let depth = |shift: f64| -> Vec<f64> {
        (0..24 * 18).map(|k| 2.5 + 0.3 * ((k % 24) as f64 * 0.2 + shift).sin() + 0.2 * ((k / 24) as f64 * 0.3).cos()).collect()
    };
    let second = RigidTransform::new(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.05));
    let maps = [
        PointMap::from_depth(&depth(0.0), &intr, &RigidTransform::identity(), vec![1.0; 24 * 18]).unwrap(),
        PointMap::from_depth(&depth(0.5), &intr, &second, vec![1.0; 24 * 18]).unwrap(),
    ];
    fs::create_dir(tmp.path().join("maps")).unwrap();
    for (view, map) in maps.into_iter().enumerate() {
        io::write_pointmap(tmp.path().join(format!("maps/edge_0_1_view_{view}")), &PointMapRecord { edge_n: 0, edge_m: 1, view, map }).unwrap();
    }
    let stdout = ok(tmp.path(), &["align", "--pointmaps", "maps", "--out", "aligned"]);
    let focal: f64 = stdout.strip_prefix("focal ").unwrap().split(';').next().unwrap().parse().unwrap();
    assert!((focal - 40.0).abs() / 40.0 < 1e-3, "focal {focal}");
    let poses = io::read_tum(tmp.path().join("aligned/trajectory.tum")).unwrap();
    assert_eq!(poses.len(), 2);
    let scales = io::read_scales(tmp.path().join("aligned/scales.txt")).unwrap();
    assert_eq!(scales.len(), 1);
    assert!((scales[0].2 - 1.0).abs() < 1e-9);
}

#[test]
fn train_and_scene_evaluation_agree() {
    let tmp = tempfile::tempdir().unwrap();
    generate_tiny(tmp.path(), "ds", "0");
    fs::write(tmp.path().join("train.toml"), "iters = 15\nwarmup = 5\n").unwrap();
    let stdout = ok(tmp.path(), &["train", "--data", "ds", "--config", "train.toml", "--points", "100", "--intervals", "10", "--out", "tr"]);
    for f in ["scene.ply", "trajectory.tum", "loss.csv", "metrics.csv"] {
        assert!(tmp.path().join("tr").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(tmp.path().join("tr/loss.csv")).unwrap().lines().count(), 16);
    let train_row = stdout.lines().find(|l| l.starts_with("train,")).unwrap().to_string();

    let eval = ok(tmp.path(), &["evaluate", "--data", "ds", "--scene", "tr/scene.ply", "--estimate", "tr/trajectory.tum", "--label", "train", "--out", "ev"]);
    let eval_row = eval.lines().find(|l| l.starts_with("train,")).unwrap();
    let fields = |row: &str| -> Vec<f64> { row.split(',').skip(1).filter_map(|f| f.parse().ok()).collect() };
    let (t, e) = (fields(&train_row), fields(eval_row));
    assert_eq!(t.len(), 3);
    assert_eq!(e.len(), 3);
    for (a, b) in t.iter().zip(&e) {
        assert!((a - b).abs() < 1e-5, "{train_row} vs {eval_row}");
    }
}

#[test]
fn e2e_emits_metric_csv() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spec.toml"), TINY_SPEC).unwrap();
    fs::write(tmp.path().join("train.toml"), "iters = 10\nwarmup = 3\n").unwrap();
    let stdout = ok(
        tmp.path(),
        &["e2e", "--dataset-config", "spec.toml", "--config", "train.toml", "--points", "100", "--intervals", "10", "--baseline", "--out", "run"],
    );
    let csv = fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,psnr_db,ssim,lpips,ate_rmse");
    assert!(lines[1].starts_with("initial-poses,,,unavailable,"));
    assert!(lines[2].starts_with("events,"));
    assert!(lines[3].starts_with("no-events,"));
    assert!(stdout.ends_with(&csv));
    assert!(tmp.path().join("run/dataset/dataset.txt").exists());
    assert!(tmp.path().join("run/no_events/scene.ply").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing_flag = run(tmp.path(), &["decouple", "--u", "4"]);
    assert!(!missing_flag.status.success());
    assert!(!missing_flag.stderr.is_empty());
    let unknown = run(tmp.path(), &["frobnicate"]);
    assert!(!unknown.status.success());
    let bad_strategy = run(tmp.path(), &["sample", "--cloud", "x.ply", "--strategy", "best"]);
    assert!(!bad_strategy.status.success());
}

#[test]
fn pipeline_errors_name_the_module_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["sample", "--cloud", "missing.ply"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("IoFailure"));
    fs::write(tmp.path().join("bad.pfm"), b"P9\n").unwrap();
    fs::write(tmp.path().join("ev.csv"), b"x,y,t_us,p\n").unwrap();
    let out = run(tmp.path(), &["decouple", "--blur", "bad.pfm", "--events", "ev.csv", "--out", "lat"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ParseError"), "{}", String::from_utf8_lossy(&out.stderr));
}
