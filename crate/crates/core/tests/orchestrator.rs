mod common;

use std::collections::BTreeMap;
use std::path::Path;

use stepwise_core::config::ConfigError;
use stepwise_core::orchestrator::{run_loop, RunError, Workspace};
use stepwise_core::store::PreferenceStore;

use common::{config, config_text, RunSpec};
use stepwise_core::config::RunConfig;

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn interrupted_run_resumes_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let (full, partial) = (dir.path().join("full"), dir.path().join("partial"));
    let spec = RunSpec::default();
    run_loop(&config(&spec, &full)).unwrap();
    run_loop(&config(&spec, &partial)).unwrap();

    // Simulate a crash during the second iteration's exploration.
    std::fs::remove_file(partial.join("reports/iter_1.json")).unwrap();
    std::fs::remove_file(partial.join("reports/summary.json")).unwrap();
    std::fs::remove_dir_all(partial.join("datasets/iter_1")).unwrap();
    let traj_dir = partial.join("trajectories/iter_1");
    let mut trajs: Vec<_> = std::fs::read_dir(&traj_dir).unwrap().flatten().map(|e| e.path()).collect();
    trajs.sort();
    for t in trajs.iter().skip(1) {
        std::fs::remove_file(t).unwrap();
    }

    run_loop(&config(&spec, &partial)).unwrap();
    let (a, b) = (snapshot(&full), snapshot(&partial));
    let differing: Vec<_> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    assert!(differing.is_empty(), "{differing:?}");
}

#[test]
fn each_iteration_gets_a_fresh_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_loop(&config(&RunSpec::default(), dir.path())).unwrap();
    let store = PreferenceStore::new(Workspace { root: dir.path().to_path_buf() }.datasets());
    for (k, it) in summary.iterations.iter().enumerate() {
        let pairs = store.load_pairs(k).unwrap();
        assert_eq!(pairs.len(), it.pair_count);
        assert!(pairs.iter().all(|p| p.meta.task_id.starts_with(&format!("it{k}-"))));
        assert!(it.completed <= 5);
        assert_eq!(it.drafts, 10);
    }
    assert_eq!(summary.total_pairs, summary.iterations.iter().map(|i| i.pair_count).sum::<usize>());
}

#[test]
fn reports_hold_no_absolute_paths() {
    let dir = tempfile::tempdir().unwrap();
    run_loop(&config(&RunSpec::default(), dir.path())).unwrap();
    let ws = dir.path().display().to_string();
    for (name, bytes) in snapshot(&dir.path().join("reports")) {
        assert!(!String::from_utf8(bytes).unwrap().contains(&ws), "{name} leaks the workspace path");
    }
}

#[test]
fn external_hook_receives_the_export() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec {
        iterations: 1,
        hook: "wc -l < \"$1\" > hook_saw.txt",
        ..RunSpec::default()
    };
    let summary = run_loop(&config(&spec, dir.path())).unwrap();
    let seen: usize = std::fs::read_to_string(dir.path().join("hook_saw.txt")).unwrap().trim().parse().unwrap();
    assert_eq!(seen, summary.iterations[0].pair_count);
    assert_eq!(summary.iterations[0].hook.kind, "command");
}

#[test]
fn failing_hook_stops_the_run_before_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = RunSpec {
        iterations: 1,
        hook: "exit 3",
        ..RunSpec::default()
    };
    assert!(matches!(run_loop(&config(&spec, dir.path())), Err(RunError::Hook(_))));
    assert!(!dir.path().join("reports/iter_0.json").exists());
    assert!(dir.path().join("datasets/iter_0/train.jsonl").exists());
}

#[test]
fn seed_with_unregistered_tool_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = dir.path().join("seeds.jsonl");
    std::fs::write(&seeds, "{\"query\":\"q\",\"tools\":[\"teleport\"]}\n").unwrap();
    let text = config_text(&RunSpec::default(), &dir.path().join("ws")).replace(
        &format!("{}/seeds.jsonl", common::fixtures().display()),
        &seeds.display().to_string(),
    );
    let cfg = RunConfig::parse(&text, Path::new("/")).unwrap();
    let err = run_loop(&cfg).unwrap_err();
    assert!(matches!(err, RunError::Config(ConfigError::Invalid(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
}
