use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lmcascade"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) -> Output {
    let cfg = tiny();
    run(&["gen", "--config", s(&cfg), "--out", s(dir), "--seed", "5"])
}

/// Every file below `dir`, relative path and contents, sorted by path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gradcheck_passes_on_this_build() {
    let o = run(&["gradcheck", "--seeds", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for op in [
        "conv3d",
        "relu",
        "maxpool2",
        "upsample2",
        "concat",
        "spatial_softmax",
        "center_of_mass",
        "crop_resample",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with("PASS") && l.contains(op)),
            "{op} missing in\n{text}"
        );
    }
}

#[test]
fn version_names_the_config_format() {
    let o = run(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("0.1.0") && text.contains("config format 1"), "{text}");
}

#[test]
fn help_lists_every_config_key() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for key in [
        "phantom.extent_mm",
        "phantom.base_spacing",
        "phantom.noise_std",
        "dataset.split",
        "cascade.scales",
        "cascade.patch_dims",
        "cascade.noise_amplitude",
        "cascade.locnet",
        "cascade.single_scale.heatmap_sigma",
        "schedule.total_epochs",
        "train.lr",
        "train.mode",
        "eval.mc_passes",
    ] {
        assert!(text.contains(key), "{key} missing from --help");
    }
}

#[test]
fn exit_codes_separate_usage_validation_and_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();

    let o = run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=usage"), "{}", stderr(&o));

    let out = dir.path().join("x");
    let o = run(&[
        "gen",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--set",
        "cascade.scales=[4.0,2.0,1.5]",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1, "{e}");
    assert!(
        e.contains("kind=validation") && e.contains("key=cascade.scales[2]"),
        "{e}"
    );

    let o = run(&["gen", "--config", s(&cfg), "--out", s(&out), "--set", "train.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("key=train.lr"), "{}", stderr(&o));

    let missing = dir.path().join("nothing-here");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error kind=runtime"), "{}", stderr(&o));
}

#[test]
fn gen_twice_gives_identical_trees_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(gen(&a).status.code(), Some(0));
    assert_eq!(gen(&b).status.code(), Some(0));
    let ta = tree(&a);
    assert!(ta.len() > 4);
    assert_eq!(ta, tree(&b));

    let o = gen(&a);
    assert_ne!(o.status.code(), Some(0));
    let cfg = tiny();
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&a), "--seed", "5", "--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn train_predict_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let report = dir.path().join("report");
    let cfg = tiny();
    assert_eq!(gen(&data).status.code(), Some(0));

    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--mode",
        "multiscale_e2e_noise",
        "--out",
        s(&run_dir),
        "-q",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(metrics.starts_with("epoch,train_loss,val_error_mm,"));

    let manifest: Value = serde_json::from_slice(&fs::read(data.join("dataset.json")).unwrap()).unwrap();
    let first = &manifest["samples"][0];
    // Volumes are listed coarse to fine; the last one is the base grid.
    let vols = first["volumes"].as_array().unwrap();
    let base = data.join(vols[vols.len() - 1].as_str().unwrap());
    let ckpt = run_dir.join("best.ckpt");
    let o = run(&["predict", "--ckpt", s(&ckpt), "--volume", s(&base), "--mc", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pred: Value = serde_json::from_slice(&o.stdout).unwrap();
    let lms = pred["landmarks"].as_array().unwrap();
    assert_eq!(lms.len(), 2);
    for lm in lms {
        for d in 0..3 {
            let m = lm["mean_mm"][d].as_f64().unwrap();
            assert!((0.0..=32.0).contains(&m), "{pred}");
            assert!(lm["std_mm"][d].as_f64().unwrap() >= 0.0);
        }
        assert!(lm["conf_vol_mm3"].as_f64().unwrap() >= 0.0);
    }

    let arg = format!("multiscale_e2e_noise={}", run_dir.display());
    let o = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--ckpt",
        &arg,
        "--mc",
        "4",
        "--out",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = fs::read_to_string(report.join("report.csv")).unwrap();
    // One test phantom, two landmarks.
    assert_eq!(rows.lines().count(), 3, "{rows}");
    let summary: Value = serde_json::from_slice(&fs::read(report.join("summary.json")).unwrap()).unwrap();
    assert!(summary["modes"]["multiscale_e2e_noise"]["median"].as_f64().unwrap() >= 0.0);
}
