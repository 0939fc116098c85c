use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn touchsdf(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_touchsdf"))
        .args(args)
        .env("TOUCHSDF_DATA", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = touchsdf(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A fitted dataset of `n` scenes.
fn dataset(n: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen-data", "--scenes", &n.to_string(), "--seed", "3"]);
    ok(dir.path(), &["fit-codec"]);
    dir
}

fn run_dir(root: &Path, name: &str) -> PathBuf {
    root.join("runs").join(name)
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        ok(d.path(), &["gen-data", "--scenes", "4", "--seed", "3"]);
    }
    let ma = fs::read(a.path().join("scenes/manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("scenes/manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    let entries = manifest["scenes"].as_array().unwrap();
    assert_eq!(manifest["count"], 4);
    assert_eq!(entries.len(), 4);
    for e in entries {
        let bundle = a.path().join("scenes").join(e["dir"].as_str().unwrap());
        assert!(bundle.join("object.sdfg").exists() && bundle.join("touch_C.sdfg").exists());
    }
    let bundles = fs::read_dir(a.path().join("scenes")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(bundles, 4);
}

#[test]
fn strict_config_rejects_unknown_keys() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "scenes = 2\n[recon.sampler]\nstepz = 3\n").unwrap();
    let out = touchsdf(d.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    fs::write(&cfg, "scenes = 0\n").unwrap();
    assert_eq!(touchsdf(d.path(), &["gen-data", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn reconstruct_writes_outputs_and_evaluate_reports() {
    let d = dataset(3);
    let root = d.path();
    ok(root, &["reconstruct", "--workers", "1"]);
    let run = run_dir(root, "oracle-full-0mm");
    let one = fs::read(run.join("scene_00001/pred.sdfg")).unwrap();
    for f in ["pred.sdfg", "pred.ply", "trajectory.jsonl", "summary.json"] {
        assert!(run.join("scene_00000").join(f).exists(), "{f}");
    }
    let traj = fs::read_to_string(run.join("scene_00000/trajectory.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 80);

    // worker count does not change results
    ok(root, &["reconstruct"]);
    assert_eq!(one, fs::read(run.join("scene_00001/pred.sdfg")).unwrap());

    let csv = ok(root, &["evaluate"]);
    assert!(csv.starts_with("metric,B1,B2,B3,B4,B5,All,counts\ncd,"));
    assert!(run.join("report.json").exists() && run.join("report.csv").exists());
}

#[test]
fn guidance_off_matches_a_zero_control_run() {
    let d = dataset(2);
    let root = d.path();
    ok(root, &["reconstruct", "--guidance", "off"]);
    let cfg = root.join("zero.toml");
    fs::write(&cfg, "[recon.sampler]\ntrust_ratio = 0.0\n").unwrap();
    ok(root, &["reconstruct", "--config", cfg.to_str().unwrap()]);
    for s in ["scene_00000", "scene_00001"] {
        let off = fs::read(run_dir(root, "oracle-full-0mm-unguided").join(s).join("pred.sdfg")).unwrap();
        let zero = fs::read(run_dir(root, "oracle-full-0mm").join(s).join("pred.sdfg")).unwrap();
        assert_eq!(off, zero, "{s}");
    }
}

#[test]
fn ground_truth_scores_ideal_and_missing_scenes_are_excluded() {
    let d = dataset(3);
    let root = d.path();
    let run = run_dir(root, "oracle-full-0mm");
    for s in ["scene_00000", "scene_00001"] {
        fs::create_dir_all(run.join(s)).unwrap();
        fs::copy(root.join("scenes").join(s).join("object.sdfg"), run.join(s).join("pred.sdfg")).unwrap();
    }
    let out = touchsdf(root, &["evaluate"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[2]"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 2);
    let all = |m: &str| {
        report["rows"].as_array().unwrap().iter().find(|r| r["metric"] == m).unwrap()["all"].as_f64().unwrap()
    };
    for (m, ideal) in [("cd", 0.0), ("nc", 1.0), ("fscore", 1.0), ("voxel_iou", 1.0), ("emd", 0.0), ("iou3d", 1.0), ("adds", 0.0)] {
        assert!((all(m) - ideal).abs() < 1e-6, "{m}: {}", all(m));
    }
}

#[test]
fn scene_failures_are_isolated() {
    let d = dataset(3);
    let root = d.path();
    fs::write(root.join("scenes/scene_00001/hand.sdfg"), b"garbage").unwrap();
    let out = touchsdf(root, &["reconstruct"]);
    assert_eq!(out.status.code(), Some(1));
    let run = run_dir(root, "oracle-full-0mm");
    assert!(run.join("scene_00000/pred.sdfg").exists() && run.join("scene_00002/pred.sdfg").exists());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 2);
    assert_eq!(summary["failed"][0][0], 1);
}

#[test]
fn corrupted_codec_is_an_error_not_a_crash() {
    let d = dataset(2);
    let root = d.path();
    fs::write(root.join("codec.bin"), b"CODC\x01").unwrap();
    let out = touchsdf(root, &["reconstruct"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codec"));
}

#[test]
fn ablate_tabulates_deltas_against_full_sensing() {
    let d = dataset(2);
    let root = d.path();
    ok(root, &["ablate"]);
    let csv = fs::read_to_string(root.join("ablation/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("run,ablation,noise_mm,failed,cd,"));
    assert!(lines[0].contains("delta_voxel_iou"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["oracle-full-0mm", "oracle-no-touch-0mm", "oracle-vision-only-0mm", "oracle-full-3mm", "oracle-full-5mm"]
    );
    let first: Vec<f64> = lines[1].split(',').skip(13).map(|v| v.parse().unwrap()).collect();
    assert!(first.iter().all(|v| *v == 0.0));
}
