//! Exercises the command-line binary end to end on a throwaway directory:
//! scene generation, a short training run, inference, and evaluation.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rvos"))
        .args(args)
        .output()
        .expect("binary runs");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

#[test]
fn generate_train_infer_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let path = |name: &str| root.join(name).to_string_lossy().into_owned();

    let (ok, log) = run(&[
        "gen",
        "--seed",
        "3",
        "--out",
        &path("scene"),
        "--height",
        "32",
        "--width",
        "32",
    ]);
    assert!(ok, "gen failed: {log}");
    assert!(root.join("scene/scene.json").is_file());
    assert!(root.join("scene/gt/expr_000/frame_000.pgm").is_file());

    let cfg = "model.dim = 8\nmodel.enc_layers = 1\nmodel.dec_layers = 1\n\
               model.num_queries = 2\ncpk.hidden = 8\ntrain.scenes = 1\n\
               train.height = 32\ntrain.width = 32\ntrain.objects = 2\n\
               train.iters = 2\ntrain.eval_every = 1000\n";
    fs::write(root.join("tiny.cfg"), cfg).unwrap();
    let (ok, log) = run(&["train", "--config", &path("tiny.cfg"), "--out", &path("run")]);
    assert!(ok, "train failed: {log}");
    assert!(root.join("run/model.ckpt").is_file());
    assert!(root.join("run/loss.csv").is_file());

    let (ok, log) = run(&[
        "infer",
        "--ckpt",
        &path("run/model.ckpt"),
        "--scene",
        &path("scene"),
        "--out",
        &path("pred"),
    ]);
    assert!(ok, "infer failed: {log}");
    assert!(root.join("pred/masks/expr_000/frame_000.pgm").is_file());
    assert!(root.join("pred/masks/scores.json").is_file());

    let (ok, log) = run(&[
        "eval",
        "--pred",
        &path("pred/masks"),
        "--gt",
        &path("scene/gt"),
        "--report",
        &path("report.json"),
    ]);
    assert!(ok, "eval failed: {log}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    for key in ["J", "F", "JF", "overall_iou", "mean_iou", "mAP"] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
}

#[test]
fn errors_surface_with_nonzero_exit() {
    let (ok, log) = run(&["train", "--config", "/nonexistent.cfg", "--out", "/tmp/x"]);
    assert!(!ok);
    assert!(log.contains("error:"), "no error line in {log}");

    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "train.mystery = 1\n").unwrap();
    let (ok, log) = run(&[
        "train",
        "--config",
        &dir.path().join("bad.cfg").to_string_lossy(),
        "--out",
        &dir.path().join("out").to_string_lossy(),
    ]);
    assert!(!ok);
    assert!(log.contains("train.mystery"), "unknown key not named: {log}");
}

#[test]
fn eval_rejects_mismatched_trees() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt/expr_000");
    fs::create_dir_all(&gt).unwrap();
    // 2x2 all-background mask in the 8-bit binary format the tool reads.
    fs::write(gt.join("frame_000.pgm"), b"P5\n2 2\n255\n\0\0\0\0").unwrap();
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    let (ok, log) = run(&[
        "eval",
        "--pred",
        &pred.to_string_lossy(),
        "--gt",
        &dir.path().join("gt").to_string_lossy(),
        "--report",
        &dir.path().join("r.json").to_string_lossy(),
    ]);
    assert!(!ok, "mismatched trees should fail: {log}");
}

#[test]
fn single_and_multi_inference_write_the_same_tree_shape() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let path = |name: &str| root.join(name).to_string_lossy().into_owned();

    let cfg = "model.dim = 8\nmodel.enc_layers = 1\nmodel.dec_layers = 1\n\
               model.num_queries = 2\ncpk.hidden = 8\ntrain.scenes = 1\n\
               train.height = 32\ntrain.width = 32\ntrain.objects = 2\n\
               train.iters = 1\ntrain.eval_every = 1000\n";
    fs::write(root.join("tiny.cfg"), cfg).unwrap();
    let (ok, log) = run(&["train", "--config", &path("tiny.cfg"), "--out", &path("run")]);
    assert!(ok, "train failed: {log}");
    let (ok, log) = run(&[
        "gen",
        "--seed",
        "5",
        "--out",
        &path("scene"),
        "--height",
        "32",
        "--width",
        "32",
        "--paraphrases",
        "2",
    ]);
    assert!(ok, "gen failed: {log}");

    for mode in ["single", "multi"] {
        let (ok, log) = run(&[
            "infer",
            "--ckpt",
            &path("run/model.ckpt"),
            "--scene",
            &path("scene"),
            "--mode",
            mode,
            "--out",
            &path(mode),
        ]);
        assert!(ok, "{mode} infer failed: {log}");
    }
    let count = |p: &Path| fs::read_dir(p).unwrap().count();
    assert_eq!(
        count(&root.join("single/masks")),
        count(&root.join("multi/masks")),
    );
}
