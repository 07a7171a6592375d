//! End-to-end checks of the attn binary: the full command chain on a small
//! fixture, seed plumbing, and error exits. Everything runs the compiled
//! binary through std::process, exactly as a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attn"))
        .args(args)
        .output()
        .expect("spawn attn")
}

fn ok(args: &[&str]) -> String {
    let out = attn(args);
    assert!(
        out.status.success(),
        "attn {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = attn(args);
    assert!(
        !out.status.success(),
        "attn {args:?} unexpectedly succeeded\nstdout: {}",
        String::from_utf8_lossy(&out.stdout),
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small fixture: full quality is irrelevant here, only that every command
/// runs, reads what the previous one wrote, and exits zero.
fn write_small_config(path: &Path) {
    fs::write(
        path,
        "source_images_per_class = 3\n\
         frames_per_video = 3\n\
         train_videos_per_class = 2\n\
         test_videos_per_class = 2\n\
         pretrain_epochs = 2\n\
         enet_epochs = 2\n\
         seed = 9\n",
    )
    .expect("write config");
}

#[test]
fn full_chain_runs_and_reports() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("run.conf");
    write_small_config(&cfg);
    let cfg = cfg.to_str().expect("utf8 path");
    let path = |name: &str| {
        dir.path()
            .join(name)
            .to_str()
            .expect("utf8 path")
            .to_owned()
    };

    let data = path("data");
    ok(&["synth", "--config", cfg, "--out", &data]);
    let manifest = path("data/manifest.jsonl");
    assert!(Path::new(&manifest).is_file());

    let net = path("net.atnw");
    let stdout = ok(&[
        "pretrain", "--config", cfg, "--manifest", &manifest, "--net-out", &net,
    ]);
    assert!(stdout.contains("trained 2 epochs"), "stdout: {stdout}");

    let cache = path("cache.attc");
    ok(&[
        "cache", "--config", cfg, "--manifest", &manifest, "--net", &net, "--cache-out", &cache,
    ]);

    let unatt = path("unatt.jsonl");
    ok(&[
        "classify-unatt", "--config", cfg, "--manifest", &manifest, "--cache", &cache,
        "--scores-out", &unatt,
    ]);

    let cnn = path("cnn.jsonl");
    ok(&[
        "classify-cnn", "--config", cfg, "--manifest", &manifest, "--net", &net, "--scores-out",
        &cnn, "--average-all",
    ]);

    let model = path("enet.aten");
    let log = path("enet_log.jsonl");
    ok(&[
        "train-energynet", "--config", cfg, "--manifest", &manifest, "--cache", &cache,
        "--model-out", &model, "--log-out", &log,
    ]);
    assert!(fs::read_to_string(&log).expect("log").lines().count() >= 1);

    let enet = path("enet.jsonl");
    ok(&[
        "classify-energynet", "--config", cfg, "--manifest", &manifest, "--cache", &cache,
        "--model", &model, "--scores-out", &enet,
    ]);

    for scores in [&unatt, &cnn, &enet] {
        let report = path("report.json");
        let stdout = ok(&[
            "eval", "--config", cfg, "--manifest", &manifest, "--scores", scores,
            "--report-out", &report,
        ]);
        assert!(stdout.contains("mean_ap"), "stdout: {stdout}");
        assert!(stdout.contains("over 8 videos"), "stdout: {stdout}");
        let body = fs::read_to_string(&report).expect("report");
        assert!(body.contains("\"top1\""), "report: {body}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("run.conf");
    write_small_config(&cfg);
    let cfg = cfg.to_str().expect("utf8 path");

    // The manifest itself is layout only, so the seed must be read off the
    // pixels: take the first frame of the first record.
    let synth = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["synth", "--config", cfg, "--out", out.to_str().expect("utf8")];
        args.extend_from_slice(extra);
        ok(&args);
        let manifest = fs::read_to_string(out.join("manifest.jsonl")).expect("manifest");
        let first = manifest.lines().next().expect("record");
        let frame = first
            .split("\"frames\":[\"")
            .nth(1)
            .and_then(|rest| rest.split('"').next())
            .expect("frame path");
        (manifest.clone(), fs::read(out.join(frame)).expect("frame"))
    };

    let (manifest_a, frame_a) = synth("a", &[]);
    let (manifest_b, frame_b) = synth("b", &[]);
    let (manifest_c, frame_c) = synth("c", &["--seed", "10"]);
    assert_eq!(manifest_a, manifest_b, "same config must reproduce the dataset");
    assert_eq!(frame_a, frame_b, "same config must reproduce frame pixels");
    assert_eq!(manifest_a, manifest_c, "layout does not depend on the seed");
    assert_ne!(frame_a, frame_c, "--seed must change frame pixels");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().expect("tempdir");
    let missing = dir.path().join("nope.conf");
    let stderr = fails(&[
        "synth", "--config", missing.to_str().expect("utf8"), "--out",
        dir.path().join("x").to_str().expect("utf8"),
    ]);
    assert!(stderr.contains("error:"), "stderr: {stderr}");

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "no_such_key = 1\n").expect("write config");
    let stderr = fails(&[
        "synth", "--config", bad.to_str().expect("utf8"), "--out",
        dir.path().join("y").to_str().expect("utf8"),
    ]);
    assert!(stderr.contains("no_such_key"), "stderr: {stderr}");

    let cfg = dir.path().join("run.conf");
    write_small_config(&cfg);
    let stderr = fails(&[
        "eval", "--config", cfg.to_str().expect("utf8"), "--manifest",
        dir.path().join("absent.jsonl").to_str().expect("utf8"), "--scores",
        dir.path().join("absent_scores.jsonl").to_str().expect("utf8"), "--report-out",
        dir.path().join("r.json").to_str().expect("utf8"),
    ]);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}
