use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn maskforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskforge")).args(args).current_dir(cwd).output().expect("spawn maskforge")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
learning_rate = 0.01
max_epochs = 2
batch_size = 2
train_queries = 128
seed = 5

[model]
channels = 8
decoder_hidden = 8
"#;

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&maskforge(&["synth", "--n", "3", "--size", "32", "--seed", "0", "--out", out], dir.path()));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in names {
        assert_eq!(fs::read(dir.path().join("a").join(&n)).unwrap(), fs::read(dir.path().join("b").join(&n)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(maskforge(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(maskforge(&["synth", "--bogus-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(maskforge(&["eval", "--manifest", "m.jsonl"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = maskforge(&["eval", "--manifest", "missing.jsonl", "--pred", ".", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&maskforge(&["synth", "--n", "2", "--size", "16", "--out", "d", "--val", "1"], dir.path()));
    fs::write(dir.path().join("bad.toml"), "max_epochs = 0\n").unwrap();
    let out = maskforge(&["train", "--config", "bad.toml", "--manifest", "d/manifest.jsonl", "--out", "m.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("typo.toml"), "learning_rat = 0.1\n").unwrap();
    let out = maskforge(&["train", "--config", "typo.toml", "--manifest", "d/manifest.jsonl", "--out", "m.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&maskforge(&["synth", "--n", "6", "--size", "32", "--seed", "3", "--out", "data", "--jpeg-quality", "30", "--val", "1", "--test", "2"], p));

    // rediscover the same pairs from the file names
    ok(&maskforge(&["pair", "--root", "data", "--out", "found.jsonl", "--val-frac", "0.2", "--test-frac", "0.3"], p));
    assert_eq!(fs::read_to_string(p.join("found.jsonl")).unwrap().lines().count(), 6);

    fs::write(p.join("train.toml"), TINY_CONFIG).unwrap();
    ok(&maskforge(&["train", "--config", "train.toml", "--manifest", "data/manifest.jsonl", "--out", "m.ckpt", "--seed", "9"], p));
    let log = fs::read_to_string(p.join("m.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "ce", "mmd", "val_f1", "lr"] {
        assert!(first.get(key).is_some(), "log row lacks {key}");
    }

    ok(&maskforge(&["generate", "--ckpt", "m.ckpt", "--manifest", "data/manifest.jsonl", "--out", "pred", "--baseline"], p));
    for id in ["synth_000004", "synth_000005"] {
        assert!(p.join(format!("pred/{id}_mask.png")).is_file());
        assert!(p.join(format!("pred/{id}_baseline.png")).is_file());
    }

    ok(&maskforge(&["filter", "--in", "pred", "--report", "filter.jsonl"], p));
    let rows: Vec<serde_json::Value> = fs::read_to_string(p.join("filter.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let f = r["fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
        assert!(r["verdict"] == "valid" || r["reason"].is_string());
    }

    ok(&maskforge(&["eval", "--manifest", "data/manifest.jsonl", "--pred", "pred", "--out", "model.json"], p));
    ok(&maskforge(&["eval", "--manifest", "data/manifest.jsonl", "--pred", "pred", "--suffix", "_baseline", "--out", "base.json"], p));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("model.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["images"], 2);

    ok(&maskforge(&["plot", "--manifest", "data/manifest.jsonl", "--pred", "pred", "--out", "panels", "--report", "model.json", "--report", "base.json"], p));
    let panel = image::open(p.join("panels/synth_000004_panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (32, 4 * 32 + 3 * 2));
    assert_eq!(fs::read_to_string(p.join("panels/panels.jsonl")).unwrap().lines().count(), 2);

    // rerunning gives identical outputs
    let before = fs::read(p.join("pred/synth_000004_mask.png")).unwrap();
    ok(&maskforge(&["generate", "--ckpt", "m.ckpt", "--manifest", "data/manifest.jsonl", "--out", "pred"], p));
    assert_eq!(before, fs::read(p.join("pred/synth_000004_mask.png")).unwrap());
}
