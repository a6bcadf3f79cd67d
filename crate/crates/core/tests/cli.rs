use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn thermoflux(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoflux"))
        .current_dir(dir)
        .env_remove("THERMOFLUX_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn loss_on_affine_ground_truth_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"scene": {"kind": "preset", "name": "affine-plane", "size": 64, "frames": 3}, "output": "run"}"#,
    )
    .unwrap();
    let out = thermoflux(dir.path(), &["loss", "c.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("run/loss.json"));
    assert!(report["total"].as_f64().unwrap() < 1e-3);
    for term in ["rec_T", "gc_T", "rec_RGB", "gc_RGB"] {
        assert!(report[term].as_f64().unwrap() < 1e-3, "{term}");
    }
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["command"], "loss");
    assert_eq!(manifest["config"]["optimizer"]["max_iterations"], 2000);
    assert_eq!(manifest["config"]["weights"]["lambda_rgb"], 1.0);
}

#[test]
fn gradcheck_with_default_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), "{}").unwrap();
    let out = thermoflux(dir.path(), &["gradcheck", "c.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("out/gradcheck.json"));
    assert!(report["checked"].as_u64().unwrap() >= 200);
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn render_refine_and_evaluate_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("render.json"),
        r#"{"scene": {"kind": "preset", "name": "textured-corner", "size": 24, "frames": 5}, "output": "fx"}"#,
    )
    .unwrap();
    std::fs::write(
        root.join("refine.json"),
        r#"{"extends": "indoor", "scene": {"kind": "fixture", "path": "fx"}, "optimizer": {"max_iterations": 5}, "output": "ref"}"#,
    )
    .unwrap();
    assert!(thermoflux(root, &["render", "render.json"]).status.success());
    for f in ["rig.json", "poses.json", "rgb/000004.ppm", "thermal/000004.pgm", "depth/000004.pfm"] {
        assert!(root.join("fx").join(f).is_file(), "{f}");
    }

    let same = thermoflux(root, &["eval-depth", "fx/depth", "fx/depth", "--out", "ev"]);
    assert!(same.status.success());
    let table = stdout(&same);
    let row: Vec<&str> = table.lines().nth(2).unwrap().split_whitespace().filter(|t| *t != "|").collect();
    assert_eq!(row[1], "0.000");
    assert_eq!(row[5], "1.000");

    let pose = thermoflux(root, &["eval-pose", "fx/poses.json", "fx/poses.json", "--out", "ep"]);
    assert!(pose.status.success());
    assert_eq!(json(&root.join("ep/pose_metrics.json"))["ate_mean"], 0.0);

    let refine = thermoflux(root, &["refine", "refine.json"]);
    assert!(refine.status.success(), "{}", String::from_utf8_lossy(&refine.stderr));
    let trace = std::fs::read_to_string(root.join("ref/trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,total,rec_T,gc_T,rec_RGB,gc_RGB,smooth,step_scale"));
    assert_eq!(trace.lines().count(), 7);
    let totals: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(json(&root.join("ref/motions.json")).as_array().unwrap().len(), 4);
    assert!(root.join("ref/depth/000004.pfm").is_file());

    let view = thermoflux(root, &["thermal-view", "fx/thermal/000000.pgm", "view/t.ppm", "--strategy", "wide-clip"]);
    assert!(view.status.success());
    assert!(std::fs::read(root.join("view/t.ppm")).unwrap().starts_with(b"P6\n24 24\n255\n"));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"seed": 3, "scene": {"kind": "preset", "name": "affine-plane", "size": 16, "frames": 2}, "output": "o"}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_thermoflux"))
        .current_dir(dir.path())
        .env("THERMOFLUX_SEED", "41")
        .args(["render", "c.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = json(&dir.path().join("o/manifest.json"));
    assert_eq!(manifest["config"]["seed"], 41);
    assert_eq!(manifest["config"]["gradcheck"]["seed"], 41);

    let bad = Command::new(env!("CARGO_BIN_EXE_thermoflux"))
        .current_dir(dir.path())
        .env("THERMOFLUX_SEED", "minus one")
        .args(["render", "c.json"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"optimizer": {"depth_min": -1}}"#).unwrap();
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    for args in [
        &["nonsense"][..],
        &["loss"],
        &["loss", "missing.json"],
        &["refine", "bad.json"],
        &["render", "broken.json"],
        &["thermal-view", "a.pgm", "b.ppm", "--strategy", "sepia"],
    ] {
        let out = thermoflux(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(thermoflux(dir.path(), &["--help"]).status.code(), Some(0));
}
