//! End-to-end tests driving the compiled binary the way a user would:
//! every command, the documented error surface, and cross-run determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hdrfusion"))
}

/// Small experiment: 1 s capture (8 groups), 4-channel model, 2 epochs.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let text = serde_json::json!({
        "capture": { "duration_s": 1.0 },
        "model": { "base_channels": 4, "patch_size": 2 },
        "train": { "epochs": 2, "holdout": 2, "val_every": 1 }
    });
    fs::write(&path, serde_json::to_vec_pretty(&text).unwrap()).unwrap();
    path
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Runs the command expecting failure and returns the stderr error object.
fn error_json(output: &Output) -> serde_json::Value {
    assert!(!output.status.success(), "expected failure, command passed");
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().unwrap_or("");
    serde_json::from_str::<serde_json::Value>(line)
        .unwrap_or_else(|e| panic!("stderr is not an error JSON ({e}): {stderr}"))
}

fn simulate(cfg: &Path, seed: u64, out: &Path) {
    let output = bin()
        .args(["simulate", "--config"])
        .arg(cfg)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .output()
        .unwrap();
    ok(&output);
}

fn train(cfg: &Path, seed: u64, out: &Path, dataset: &Path, resume: Option<&Path>) {
    let mut cmd = bin();
    cmd.args(["train", "--config"])
        .arg(cfg)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .arg("--dataset")
        .arg(dataset);
    if let Some(prior) = resume {
        cmd.arg("--resume").arg(prior);
    }
    ok(&cmd.output().unwrap());
}

fn infer(cfg: &Path, out: &Path, checkpoint: &Path, dataset: &Path) {
    let output = bin()
        .args(["infer", "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .arg("--checkpoint")
        .arg(checkpoint)
        .arg("--dataset")
        .arg(dataset)
        .output()
        .unwrap();
    ok(&output);
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| {
        panic!("cannot read {}: {e}", path.display());
    }))
    .unwrap()
}

#[test]
fn simulate_writes_both_datasets_with_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("sim");
    simulate(&cfg, 5, &out);

    for rel in ["scene.json", "run.json", "dcs/manifest.json", "ae/manifest.json"] {
        assert!(out.join(rel).exists(), "missing {rel}");
    }
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["format"], "hdr-fusion/run");
    assert_eq!(run["status"], "ok");
    // DCS: every reference frame forms a group (8 in 1 s at 8 Hz). AE: only
    // its EV-0 frames do (the 3 at indices 1, 4, 7 of the cycle).
    assert_eq!(run["details"]["dcs"]["groups"], 8);
    assert_eq!(run["details"]["ae"]["groups"], 3);

    let dcs = read_json(&out.join("dcs/manifest.json"));
    let first_frame = dcs["frames"][0]["path"].as_str().unwrap();
    assert!(out.join("dcs").join(first_frame).exists());
}

#[test]
fn train_infer_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    simulate(&cfg, 7, &sim);

    let run = tmp.path().join("train");
    train(&cfg, 7, &run, &sim.join("dcs"), None);
    assert!(run.join("checkpoint.bin").exists());
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let manifest = read_json(&run.join("run.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["details"]["epochs_run"], 2);
    assert!(manifest["wall_clock_s"].as_f64().unwrap() > 0.0);

    let inf = tmp.path().join("infer");
    infer(&cfg, &inf, &run.join("checkpoint.bin"), &sim.join("dcs"));
    let pfms: Vec<_> = fs::read_dir(inf.join("hdr")).unwrap().collect();
    let pngs: Vec<_> = fs::read_dir(inf.join("preview")).unwrap().collect();
    assert_eq!(pfms.len(), 8, "one HDR output per group");
    assert_eq!(pngs.len(), 8, "one preview per group");

    let eval = tmp.path().join("eval");
    let output = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&eval)
        .arg("--outputs")
        .arg(&inf)
        .arg("--dataset")
        .arg(sim.join("dcs"))
        .output()
        .unwrap();
    ok(&output);
    let report = read_json(&eval.join("report.json"));
    assert!(report["mean_psnr_mu"].as_f64().is_some());
    assert_eq!(report["per_frame"].as_array().unwrap().len(), 8);
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9, "header plus one row per frame");
    assert!(csv.starts_with("frame,"));
}

#[test]
fn one_epoch_leaves_checkpoint_and_single_history_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.json");
    fs::write(
        &cfg_path,
        serde_json::to_vec(&serde_json::json!({
            "capture": { "duration_s": 0.5 },
            "model": { "base_channels": 4, "patch_size": 2 },
            "train": { "epochs": 1, "holdout": 1, "val_every": 1 }
        }))
        .unwrap(),
    )
    .unwrap();
    let sim = tmp.path().join("sim");
    simulate(&cfg_path, 3, &sim);
    let run = tmp.path().join("train");
    train(&cfg_path, 3, &run, &sim.join("dcs"), None);
    assert!(run.join("checkpoint.bin").exists());
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn resumed_training_matches_uninterrupted_training_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let sim_cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    simulate(&sim_cfg, 9, &sim);

    let write_cfg = |epochs: usize| {
        let path = tmp.path().join(format!("config_{epochs}.json"));
        let text = serde_json::json!({
            "capture": { "duration_s": 1.0 },
            "model": { "base_channels": 4, "patch_size": 2 },
            "train": { "epochs": epochs, "holdout": 2, "val_every": 10 }
        });
        fs::write(&path, serde_json::to_vec(&text).unwrap()).unwrap();
        path
    };

    let full = tmp.path().join("full");
    train(&write_cfg(4), 9, &full, &sim.join("dcs"), None);

    let part1 = tmp.path().join("part1");
    train(&write_cfg(2), 9, &part1, &sim.join("dcs"), None);
    let part2 = tmp.path().join("part2");
    train(&write_cfg(4), 9, &part2, &sim.join("dcs"), Some(&part1));

    let a = fs::read(full.join("checkpoint.bin")).unwrap();
    let b = fs::read(part2.join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted one");

    // The resumed history carries the prior records followed by the rest.
    let full_hist = fs::read_to_string(full.join("history.jsonl")).unwrap();
    let part_hist = fs::read_to_string(part2.join("history.jsonl")).unwrap();
    let losses = |text: &str| -> Vec<f64> {
        text.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"]
                .as_f64()
                .unwrap())
            .collect()
    };
    assert_eq!(losses(&full_hist), losses(&part_hist));
}

#[test]
fn infer_rejects_checkpoint_trained_under_other_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    simulate(&cfg, 2, &sim);
    let run = tmp.path().join("train");
    train(&cfg, 2, &run, &sim.join("dcs"), None);

    // Same dataset, wider model: the stored tensors no longer fit.
    let wide = tmp.path().join("wide.json");
    fs::write(
        &wide,
        serde_json::to_vec(&serde_json::json!({
            "capture": { "duration_s": 1.0 },
            "model": { "base_channels": 8, "patch_size": 2 }
        }))
        .unwrap(),
    )
    .unwrap();
    let output = bin()
        .args(["infer", "--config"])
        .arg(&wide)
        .arg("--out")
        .arg(tmp.path().join("infer"))
        .arg("--checkpoint")
        .arg(run.join("checkpoint.bin"))
        .arg("--dataset")
        .arg(sim.join("dcs"))
        .output()
        .unwrap();
    let err = error_json(&output);
    assert_eq!(err["error"]["kind"], "model");
    let message = err["error"]["message"].as_str().unwrap();
    assert!(
        message.contains("extract/low/s1/conv.w"),
        "error does not name the first offending tensor: {message}"
    );
}

#[test]
fn evaluate_without_ground_truth_reports_stability_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    simulate(&cfg, 4, &sim);
    let run = tmp.path().join("train");
    train(&cfg, 4, &run, &sim.join("dcs"), None);
    let inf = tmp.path().join("infer");
    infer(&cfg, &inf, &run.join("checkpoint.bin"), &sim.join("dcs"));

    // Strip the ground-truth references from a copy of the dataset.
    let manifest_path = sim.join("dcs/manifest.json");
    let mut manifest = read_json(&manifest_path);
    for group in manifest["groups"].as_array_mut().unwrap() {
        group["ground_truth"] = serde_json::Value::Null;
    }
    fs::write(&manifest_path, serde_json::to_vec(&manifest).unwrap()).unwrap();

    let eval = tmp.path().join("eval");
    let output = bin()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&eval)
        .arg("--outputs")
        .arg(&inf)
        .arg("--dataset")
        .arg(sim.join("dcs"))
        .output()
        .unwrap();
    ok(&output);
    let report = read_json(&eval.join("report.json"));
    assert!(report["mean_psnr_mu"].is_null());
    assert!(report["per_frame"].as_array().unwrap().is_empty());
    assert!(report["lsd"].as_f64().is_some());
    assert!(report["l_avg"].as_f64().unwrap() > 0.0);
}

#[test]
fn compare_identical_inputs_has_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    simulate(&cfg, 6, &sim);

    let out = tmp.path().join("cmp");
    let output = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--ae")
        .arg(sim.join("dcs"))
        .arg("--dcs")
        .arg(sim.join("dcs"))
        .output()
        .unwrap();
    ok(&output);
    let report = read_json(&out.join("comparison.json"));
    assert_eq!(report["ae"]["trace"], report["dcs"]["trace"]);
    assert_eq!(report["ae"]["lsd"], report["dcs"]["lsd"]);
    assert!(report["warning"].is_null());
    let ratio = report["lsd_ratio_ae_over_dcs"].as_f64().unwrap();
    assert!((ratio - 1.0).abs() < 1e-12);
}

#[test]
fn compare_mismatched_lengths_warns_and_truncates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim_long = tmp.path().join("sim_long");
    simulate(&cfg, 8, &sim_long);
    let short_cfg = tmp.path().join("short.json");
    fs::write(
        &short_cfg,
        serde_json::to_vec(&serde_json::json!({ "capture": { "duration_s": 0.5 } })).unwrap(),
    )
    .unwrap();
    let sim_short = tmp.path().join("sim_short");
    simulate(&short_cfg, 8, &sim_short);

    // 8 AE frames against 4 reference frames from the shorter capture.
    let out = tmp.path().join("cmp");
    let output = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--ae")
        .arg(sim_long.join("ae"))
        .arg("--dcs")
        .arg(sim_short.join("dcs"))
        .output()
        .unwrap();
    ok(&output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("warning"), "no length warning printed: {stdout}");
    let report = read_json(&out.join("comparison.json"));
    assert_eq!(report["compared_frames"], 4);
    assert!(!report["warning"].is_null());
    assert_eq!(report["ae"]["frames"], 4);
    assert_eq!(report["ae"]["total_frames"], 8);
    let svg = fs::read_to_string(out.join("comparison.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn errors_are_machine_readable_json() {
    let tmp = tempfile::tempdir().unwrap();

    // Missing config file.
    let output = bin()
        .args(["simulate", "--config"])
        .arg(tmp.path().join("nope.json"))
        .arg("--out")
        .arg(tmp.path().join("o1"))
        .output()
        .unwrap();
    assert_eq!(error_json(&output)["error"]["kind"], "config");

    // Unknown config field.
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, br#"{ "tarin": {} }"#).unwrap();
    let output = bin()
        .args(["simulate", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("o2"))
        .output()
        .unwrap();
    let err = error_json(&output);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("tarin"));

    // Invalid scene JSON behind a valid config.
    let scene = tmp.path().join("scene.json");
    fs::write(&scene, b"{ not json").unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        serde_json::to_vec(&serde_json::json!({ "scene": scene })).unwrap(),
    )
    .unwrap();
    let output = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("o3"))
        .output()
        .unwrap();
    let err = error_json(&output);
    assert_eq!(err["error"]["kind"], "config");

    // Unwritable output directory (a file stands in the way).
    let blocker = tmp.path().join("blocked");
    fs::write(&blocker, b"file").unwrap();
    let output = bin()
        .arg("simulate")
        .arg("--out")
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(error_json(&output)["error"]["kind"], "io");

    // Missing --out where it is required.
    let output = bin().arg("simulate").output().unwrap();
    let err = error_json(&output);
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["message"].as_str().unwrap().contains("--out"));
}
