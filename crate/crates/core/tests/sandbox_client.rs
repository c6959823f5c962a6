mod common;

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use stepwise_core::config::RunConfig;
use stepwise_core::executor::{ExecRequest, Executor, FixtureExecutor, Profile, StdioExecutor};
use stepwise_core::orchestrator::run_loop;
use stepwise_core::{canonical, Trajectory};

use common::{config_text, RunSpec};

/// Serves the NDJSON protocol on a Unix socket, answering with the
/// in-process fixture interpreter and recording every request.
fn spawn_stub_sandbox(path: &Path) -> Arc<Mutex<Vec<ExecRequest>>> {
    let listener = UnixListener::bind(path).unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let log = log.clone();
            std::thread::spawn(move || {
                let mut line = String::new();
                BufReader::new(stream.try_clone().unwrap()).read_line(&mut line).unwrap();
                let v: serde_json::Value = serde_json::from_str(&line).unwrap();
                let reply = if v.get("op").is_some() {
                    serde_json::json!({"version": "stub", "uptime_s": 0.0, "profiles": ["agent", "filegen"]})
                } else {
                    let req: ExecRequest = serde_json::from_value(v).unwrap();
                    let resp = FixtureExecutor::new().exec(&req).unwrap();
                    log.lock().unwrap().push(req);
                    serde_json::to_value(resp).unwrap()
                };
                writeln!(&stream, "{reply}").unwrap();
            });
        }
    });
    seen
}

fn socket_config(spec: &RunSpec, ws: &Path, socket: &Path) -> RunConfig {
    let text = config_text(spec, ws).replace(
        "[sandbox]\nkind = \"fixture\"",
        &format!("[sandbox]\nkind = \"socket\"\naddress = \"{}\"", socket.display()),
    );
    RunConfig::parse(&text, Path::new("/")).unwrap()
}

fn trajectories(ws: &Path) -> Vec<Trajectory> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(ws.join("trajectories/iter_0"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| canonical::deserialize(&std::fs::read(f).unwrap()).unwrap())
        .collect()
}

#[test]
fn socket_sandbox_matches_in_process_run_and_replays_chosen_prefixes() {
    let dir = tempfile::tempdir().unwrap();
    let socket = dir.path().join("sandbox.sock");
    let requests = spawn_stub_sandbox(&socket);
    let spec = RunSpec {
        iterations: 1,
        hook: "none",
        ..RunSpec::default()
    };

    let remote = run_loop(&socket_config(&spec, &dir.path().join("remote"), &socket)).unwrap();
    let local = run_loop(&common::config(&spec, &dir.path().join("local"))).unwrap();
    assert_eq!(remote.iterations[0].dataset_digest, local.iterations[0].dataset_digest);

    let requests = requests.lock().unwrap();
    assert!(requests.iter().any(|r| r.profile == Profile::Filegen));
    let mut checked = 0;
    for traj in trajectories(&dir.path().join("remote")) {
        for step in &traj.steps {
            let id_prefix = format!("{}-s{}-c", traj.task_id, step.index);
            let sent: Vec<&ExecRequest> = requests.iter().filter(|r| r.request_id.starts_with(&id_prefix)).collect();
            let executed = step.candidates.iter().filter(|c| !c.action.code.is_empty()).count();
            assert_eq!(sent.len(), executed, "{id_prefix}");
            for r in sent {
                assert_eq!(r.prefix_codes, traj.chosen_prefix(step.index), "{}", r.request_id);
                assert!(r.workspace.ends_with(&traj.task_id));
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn unreachable_socket_fails_the_health_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = socket_config(&RunSpec::default(), &dir.path().join("ws"), &dir.path().join("missing.sock"));
    let err = run_loop(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!dir.path().join("ws").exists());
}

#[test]
fn stdio_sandbox_serves_canned_responses() {
    let script = r#"
import sys, json
for line in sys.stdin:
    r = json.loads(line)
    if r.get("op") == "health":
        out = {"version": "stub", "uptime_s": 0.0, "profiles": ["agent"]}
    elif r["candidate_code"].startswith("raise"):
        out = {"request_id": r["request_id"], "status": "error", "output": "", "error_kind": "exception", "error_message": "boom", "duration_ms": 1}
    else:
        out = {"request_id": r["request_id"], "status": "ok", "output": "prefix=%d" % len(r["prefix_codes"]), "duration_ms": 1}
    print(json.dumps(out), flush=True)
"#;
    let Ok(ex) = StdioExecutor::spawn("python3", &["-c".to_string(), script.to_string()], 60.0) else {
        eprintln!("python3 unavailable, skipping");
        return;
    };
    assert_eq!(ex.health().unwrap().profiles.len(), 1);
    let req = |code: &str| ExecRequest {
        request_id: "t-s2-c1".into(),
        profile: Profile::Agent,
        prefix_codes: vec!["x = 1".into()],
        candidate_code: code.into(),
        tool_fixtures: Default::default(),
        timeout_s: 5.0,
        workspace: PathBuf::from("/tmp"),
    };
    let ok = ex.exec(&req("print(x)")).unwrap();
    assert_eq!(ok.output, "prefix=1");
    let err = ex.exec(&req("raise ValueError()")).unwrap().into_observation(100);
    assert_eq!(err.error_kind.as_deref(), Some("exception"));
    assert_eq!(err.error_message.as_deref(), Some("boom"));
}
