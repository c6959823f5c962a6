mod common;

use std::process::{Command, Output};

use common::{config_text, RunSpec};

fn stepwise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepwise"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(code(&stepwise(&["teleport"])), 2);
}

#[test]
fn missing_or_invalid_config_exits_two() {
    assert_eq!(code(&stepwise(&["run"])), 2);
    assert_eq!(code(&stepwise(&["--config", "/nonexistent/run.toml", "run"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[run]\niterations = 1\n").unwrap();
    assert_eq!(code(&stepwise(&["--config", path.to_str().unwrap(), "run"])), 2);
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config_text(&RunSpec::default(), &ws)).unwrap();
    let out = stepwise(&["--config", path.to_str().unwrap(), "--dry-run", "run"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dry run"));
    assert!(!ws.exists());
}

#[test]
fn staged_commands_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let path = dir.path().join("run.toml");
    let spec = RunSpec {
        iterations: 1,
        ..RunSpec::default()
    };
    std::fs::write(&path, config_text(&spec, &ws)).unwrap();
    let cfg = path.to_str().unwrap();
    for stage in ["synth", "explore", "pairs"] {
        let out = stepwise(&["--config", cfg, stage]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let staged = std::fs::read(ws.join("datasets/iter_0/manifest.json")).unwrap();

    let out = stepwise(&["--config", cfg, "stats", "--csv", dir.path().join("tools.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["pair_count"].as_u64().unwrap() > 0);
    assert!(std::fs::read_to_string(dir.path().join("tools.csv")).unwrap().starts_with("tool,chosen,rejected"));

    let ws2 = dir.path().join("ws2");
    let path2 = dir.path().join("run2.toml");
    std::fs::write(&path2, config_text(&spec, &ws2)).unwrap();
    assert_eq!(code(&stepwise(&["--config", path2.to_str().unwrap(), "run"])), 0);
    assert_eq!(staged, std::fs::read(ws2.join("datasets/iter_0/manifest.json")).unwrap());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec {
        iterations: 1,
        hook: "none",
        ..RunSpec::default()
    };
    let mut manifests = Vec::new();
    for seed in ["1", "2"] {
        let ws = dir.path().join(seed);
        let path = dir.path().join(format!("{seed}.toml"));
        std::fs::write(&path, config_text(&spec, &ws)).unwrap();
        assert_eq!(code(&stepwise(&["--config", path.to_str().unwrap(), "--seed", seed, "run"])), 0);
        manifests.push(std::fs::read(ws.join("datasets/iter_0/manifest.json")).unwrap());
    }
    assert_ne!(manifests[0], manifests[1]);
}

#[test]
fn infer_prints_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config_text(&RunSpec::default(), &dir.path().join("ws"))).unwrap();
    let out = stepwise(&[
        "--config",
        path.to_str().unwrap(),
        "infer",
        "--query",
        "Who wrote the book on the desk?",
        "--tools",
        "ocr,ask_search_agent",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(traj["task_id"], "infer");
    for step in traj["steps"].as_array().unwrap() {
        assert_eq!(step["candidates"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn dpo_tools_run_without_config() {
    let out = stepwise(&["dpo-check", "--instances", "20"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("loss.csv");
    let out = stepwise(&["toy-train", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy=1.000"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 201);
    assert_eq!(code(&stepwise(&["toy-train", "--actions", "1"])), 2);
}
