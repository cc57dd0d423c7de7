//! Drives the binary through pretrain, train, eval and export.

use std::path::Path;
use std::process::Command;

const CONFIG: &str = "seed = 2
[task]
dataset_seed = 3
dataset_size = 256
[model]
hidden = 16
depth = 1
[pretrain]
steps = 40
batch_size = 16
[rl]
steps = 4
groups_per_step = 2
pool_size = 4
eval_interval = 2
time_steps = 6
[eval]
bench_size = 4
";

fn tagrpo(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tagrpo"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "tagrpo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_cli_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let run = dir.path().join("full");
    tagrpo(&["pretrain", "--config", s(&cfg), "--out-dir", s(&run)]);
    assert!(run.join("pretrained.ckpt").exists());

    tagrpo(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    let ablation = dir.path().join("no-bank");
    tagrpo(&[
        "train",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&ablation),
        "--no-memory-bank",
        "--init",
        s(&run.join("pretrained.ckpt")),
    ]);

    let out = tagrpo(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run.join("policy.ckpt")),
        "--out-dir",
        s(&run),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("eval over 4 pairs"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["per_pair"].as_array().unwrap().len(), 4);

    let export = dir.path().join("export");
    tagrpo(&[
        "export",
        s(&run.join("train_log.csv")),
        s(&ablation.join("train_log.csv")),
        "--out-dir",
        s(&export),
    ]);
    let svg = std::fs::read_to_string(export.join("curves.svg")).unwrap();
    assert_eq!(svg.matches("class=\"curve\"").count(), 2);
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[task]\ndataset_seed = 1\nframes = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tagrpo"))
        .args(["pretrain", "--config", s(&cfg), "--out-dir", s(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("task.frames"));

    std::fs::write(&cfg, CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tagrpo"))
        .args([
            "train",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&dir.path().join("empty")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));

    let out = Command::new(env!("CARGO_BIN_EXE_tagrpo"))
        .args(["train", "--config", s(&cfg), "--algo", "ppo"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
