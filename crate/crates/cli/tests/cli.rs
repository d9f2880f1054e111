//! End-to-end checks of the installed binary: flag surface, exit codes,
//! artifact layout.

use std::process::Command;

fn normint() -> Command {
    Command::new(env!("CARGO_BIN_EXE_normint"))
}

#[test]
fn synth_validate_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let status = normint()
        .args([
            "synth", "--shape", "sphere", "--views", "3", "--res", "40x40", "--seed", "3", "--out",
        ])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["scene.json", "cameras.json", "normal_002.pfm", "mask_000.pfm", "gt_mesh.obj"] {
        assert!(scene.join(name).exists(), "missing {name}");
    }

    let status = normint().args(["validate", "--scene"]).arg(&scene).status().unwrap();
    assert!(status.success());

    let out = dir.path().join("run");
    let status = normint()
        .args(["train", "--scene"])
        .arg(&scene)
        .args([
            "--desk",
            "--batches",
            "40",
            "--patches",
            "64",
            "--mc-res",
            "48",
            "--hash-finest-res",
            "64",
            "--hash-table-log2",
            "12",
            "--deterministic",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["checkpoint.bin", "metrics.csv", "mesh.obj", "manifest.json", "train_summary.json"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    // Eval the gt mesh against itself through the CLI.
    let output = normint()
        .args(["eval", "--mesh"])
        .arg(scene.join("gt_mesh.obj"))
        .args(["--scene"])
        .arg(&scene)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    let report: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(report["f_score"], 1.0);
    assert_eq!(report["chamfer_l2"], 0.0);

    // Render one view from the checkpoint.
    let render_out = dir.path().join("render");
    let status = normint()
        .args(["render-normals", "--checkpoint"])
        .arg(out.join("checkpoint.bin"))
        .args(["--scene"])
        .arg(&scene)
        .args(["--mode", "vr-dfd", "--views", "0", "--step", "5e-3", "--out"])
        .arg(&render_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(render_out.join("normal_render_000.pfm").exists());
    assert!(render_out.join("opacity_000.pfm").exists());
}

#[test]
fn missing_scene_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = normint()
        .args(["train", "--scene"])
        .arg(dir.path().join("nope"))
        .args(["--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_shape_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = normint()
        .args(["synth", "--shape", "teapot", "--out"])
        .arg(dir.path().join("scene"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_render_mode_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let status = normint()
        .args(["render-normals", "--checkpoint"])
        .arg(dir.path().join("x.bin"))
        .args(["--scene"])
        .arg(dir.path().join("scene"))
        .args(["--mode", "vr-xx", "--views", "0", "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn corrupted_scene_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    assert!(normint()
        .args(["synth", "--views", "2", "--res", "24x24", "--out"])
        .arg(&scene)
        .status()
        .unwrap()
        .success());
    std::fs::remove_file(scene.join("mask_001.pfm")).unwrap();
    let status = normint().args(["validate", "--scene"]).arg(&scene).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
