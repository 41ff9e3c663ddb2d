//! End-to-end checks of the binary: exit codes, artifact layout, and
//! rerun determinism.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chguide"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("chguide_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = bin().arg("warp").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = temp_dir("badconfig");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "experiment = gaussian\n[schedule]\nwat = 1\n").unwrap();
    let out = bin()
        .args(["gaussian", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "stderr: {stderr}");
}

#[test]
fn invalid_run_exits_with_three_and_marks_failure() {
    let dir = temp_dir("runtimefail");
    let cfg = dir.join("run.cfg");
    // More sampling steps than schedule steps: rejected at run time.
    std::fs::write(
        &cfg,
        "experiment = gaussian\n[schedule]\nn = 50\nb2 = 0.02\n[sampler]\nkind = ddim\nsteps = 80\n[run]\nbatch = 4\n",
    )
    .unwrap();
    let out = bin()
        .args(["gaussian", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.join("run/FAILED").exists());
}

#[test]
fn small_paired_run_produces_artifacts_and_is_deterministic() {
    let dir = temp_dir("smallrun");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "experiment = gaussian\n[schedule]\nn = 60\nb2 = 0.02\n[sampler]\nkind = ddim\nsteps = 8\n[run]\nbatch = 24\n",
    )
    .unwrap();
    let run = dir.join("run");
    let status = bin()
        .args(["gaussian", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .args(["--seed", "11", "--paired"])
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["samples.csv", "samples_cf.csv", "metrics.json", "traces.json", "config_echo.txt"] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }
    let first = std::fs::read(run.join("samples.csv")).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["paired"]["kl_ch"].is_number());

    // Byte-identical rerun with the same seed and config.
    let status = bin()
        .args(["gaussian", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .args(["--seed", "11", "--paired"])
        .status()
        .unwrap();
    assert!(status.success());
    let second = std::fs::read(run.join("samples.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn diagnose_emits_a_mixing_error_report() {
    let dir = temp_dir("diagnose");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "experiment = diagnose\n[diagnose]\nprobes = 3\ntimes = 2\nomega_list = 0,2\n",
    )
    .unwrap();
    let run = dir.join("run");
    let out = bin()
        .args(["diagnose", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let entries = metrics["diagnose"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    // The linear field's residual grows with the scale; the corrected
    // one stays at the stencil floor.
    for e in entries {
        if e["omega"].as_f64().unwrap() > 0.0 {
            assert!(e["cf_mean_norm"].as_f64().unwrap() > e["ch_mean_norm"].as_f64().unwrap());
        }
    }
}

#[test]
fn iterstudy_emits_per_step_profiles() {
    let dir = temp_dir("iterstudy");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "experiment = iterstudy\n[schedule]\nn = 120\nb2 = 0.02\n[sampler]\nkind = ode\n[run]\nbatch = 9\n[iterstudy]\ntolerances = 1e-2\n",
    )
    .unwrap();
    let run = dir.join("run");
    let out = bin()
        .args(["iterstudy", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let sweeps = metrics["iterstudy"]["sweeps"].as_array().unwrap();
    assert_eq!(sweeps.len(), 1);
    assert_eq!(sweeps[0]["steps"].as_array().unwrap().len(), 120);
    assert!(run.join("traces.json").exists());
}

#[test]
fn mh_emits_datasets_per_temperature() {
    let dir = temp_dir("mh");
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "experiment = mh\n[magnet]\nmh_samples = 60\nreference_samples = 40\nchains = 2\nburn_in = 50\nthin = 2\nside = 4\n",
    )
    .unwrap();
    let run = dir.join("run");
    let out = bin()
        .args(["mh", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["dataset_T200.csv", "dataset_T201.csv", "dataset_T196.csv"] {
        let text = std::fs::read_to_string(run.join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("16,"), "{name} header");
    }
    assert!(run.join("magnetization_T196.csv").exists());
}
