use std::path::Path;
use std::process::{Command, Output};

fn nmvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmvs"))
        .args(args)
        .env_remove("NEURALMVS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run nmvs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn make_toy(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["make-toy", "--out", path(dir), "--res", "16x16", "--views", "9"];
    args.extend_from_slice(extra);
    nmvs(&args)
}

fn write_tiny_config(path: &Path, steps: usize) {
    let cfg = format!(
        r#"{{"steps": {steps}, "unet": {{"channels": [4, 4, 4], "out_dim": 64}}, "schedule": {{"levels": [[4, 2], [2, 1], [1, 1]]}}}}"#
    );
    std::fs::write(path, cfg).expect("write config");
}

#[test]
fn make_toy_defaults_write_a_full_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nmvs(&["make-toy", "--out", path(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let count = |sub: &str, ext: &str| {
        std::fs::read_dir(tmp.path().join(sub))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
            .count()
    };
    assert_eq!(count("images", "png"), 20);
    assert_eq!(count("depth_gt", "pfm"), 20);
    assert!(tmp.path().join("cameras.json").is_file());
}

#[test]
fn make_toy_rejects_too_few_views() {
    let tmp = tempfile::tempdir().unwrap();
    let out = make_toy(tmp.path(), &["--views", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn make_toy_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(make_toy(d.path(), &["--scene", "two-spheres", "--seed", "7"]).status.success());
    }
    for rel in ["cameras.json", "images/000.png", "images/008.png", "depth_gt/004.pfm"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs");
    }
}

#[test]
fn unknown_flag_and_missing_paths_are_usage_errors() {
    let out = nmvs(&["make-toy", "--out", "/tmp/x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = nmvs(&["select-views", "--data", "/nonexistent/scene", "--target-index", "0", "--out", "/tmp/sel.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = nmvs(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("make-toy", &["--out", "--scene", "--views", "--res", "--config", "--seed"]),
        ("train", &["--data", "--config", "--out", "--resume"]),
        ("render", &["--checkpoint", "--data", "--view-index", "--out"]),
        ("eval", &["--checkpoint", "--data", "--split", "--out"]),
        ("select-views", &["--data", "--target-index", "--out"]),
        ("ablate", &["--data", "--config", "--out"]),
    ];
    for (cmd, flags) in expected {
        let out = nmvs(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn select_views_writes_three_ids_and_normalised_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    assert!(make_toy(&data, &[]).status.success());
    let sel = tmp.path().join("sel.json");
    let out = nmvs(&["select-views", "--data", path(&data), "--target-index", "3", "--out", path(&sel)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&sel).unwrap()).unwrap();
    let ids = v["view_ids"].as_array().unwrap();
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|i| i.as_u64().unwrap() != 3));
    let sum: f64 = v["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn train_render_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    assert!(make_toy(&data, &[]).status.success());
    let cfg = tmp.path().join("train.json");
    write_tiny_config(&cfg, 2);
    let run = tmp.path().join("run");
    let out = nmvs(&["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let resumed = tmp.path().join("resumed");
    let out = nmvs(&["train", "--data", path(&data), "--config", path(&cfg), "--out", path(&resumed), "--resume", path(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(resumed.join("history.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 3);

    let renders = tmp.path().join("renders");
    let out = nmvs(&["render", "--checkpoint", path(&ckpt), "--data", path(&data), "--view-index", "0", "--out", path(&renders)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["view000_color.png", "view000_depth.pfm", "view000_conf.png"] {
        assert!(renders.join(f).is_file(), "missing {f}");
    }

    let metrics = tmp.path().join("metrics.json");
    let out = nmvs(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--split", "test", "--out", path(&metrics)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert!(v["psnr_mean"].is_number());
    assert!(v["ssim_mean"].is_number());

    let out = nmvs(&["render", "--checkpoint", path(&ckpt), "--data", path(&data), "--view-index", "99", "--out", path(&renders)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    assert!(make_toy(&data, &[]).status.success());
    let cfg = tmp.path().join("train.json");
    write_tiny_config(&cfg, 1);
    let train = |out: &Path, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_nmvs"));
        cmd.args(["train", "--data", path(&data), "--config", path(&cfg), "--out", path(out)]);
        cmd.env_remove("NEURALMVS_SEED").env("RUST_LOG", "warn");
        if let Some(s) = seed {
            cmd.env("NEURALMVS_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(train(&tmp.path().join("a"), None), 0);
    assert_eq!(train(&tmp.path().join("b"), Some("42")), 42);
}

#[test]
fn ablate_reports_five_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("scene");
    assert!(make_toy(&data, &["--scene", "two-spheres"]).status.success());
    let cfg = tmp.path().join("train.json");
    write_tiny_config(&cfg, 1);
    let out_dir = tmp.path().join("ablation");
    let out = nmvs(&["ablate", "--data", path(&data), "--config", path(&cfg), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("ablation.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["complete", "conv1x1", "fewer_steps", "no_delaunay", "no_posenc"]);
}
