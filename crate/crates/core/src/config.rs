//! Run configuration (TOML) and construction of the backends it names.
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::DpoConfig;
use crate::executor::{Executor, FixtureExecutor, SocketExecutor, StdioExecutor};
use crate::explorer::ExploreConfig;
use crate::gateway::{ChatBackend, Gateway, MockBackend, OpenAiBackend, RoleTag};
use crate::model::{ToolRegistrySpec, Validate};
use crate::sim::SimBackend;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub iterations: usize,
    /// Completed trajectories per iteration.
    pub d: usize,
    #[serde(default = "default_seeds_per_call")]
    pub seeds_per_call: usize,
    #[serde(default)]
    pub rng_seed: u64,
    pub workspace: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub seed_pool: PathBuf,
    pub registry: PathBuf,
    #[serde(default)]
    pub image_index: Option<PathBuf>,
    /// Drafts requested per task-generation call.
    #[serde(default = "default_queries_per_call")]
    pub queries_per_call: usize,
    /// `"toy"` for the built-in trainer, `"none"`, or a shell command that
    /// receives the exported training file path as `$1`.
    #[serde(default = "default_hook")]
    pub tuning_hook: String,
}

fn default_seeds_per_call() -> usize {
    20
}
fn default_workers() -> usize {
    4
}
fn default_queries_per_call() -> usize {
    5
}
fn default_hook() -> String {
    "toy".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Sim {
        #[serde(default)]
        seed: Option<u64>,
    },
    Mock {
        fixtures: PathBuf,
    },
    Openai {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_http_timeout")]
        timeout_s: f64,
        #[serde(default)]
        single_sample: bool,
    },
}

fn default_http_timeout() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SandboxConfig {
    Fixture {
        #[serde(default = "default_exec_timeout")]
        timeout_s: f64,
    },
    Socket {
        address: PathBuf,
        #[serde(default = "default_exec_timeout")]
        timeout_s: f64,
        #[serde(default = "default_hard_cap")]
        hard_cap_s: f64,
    },
    Stdio {
        command: Vec<String>,
        #[serde(default = "default_exec_timeout")]
        timeout_s: f64,
        #[serde(default = "default_hard_cap")]
        hard_cap_s: f64,
    },
}

fn default_exec_timeout() -> f64 {
    30.0
}
fn default_hard_cap() -> f64 {
    120.0
}

impl SandboxConfig {
    pub fn timeout_s(&self) -> f64 {
        match self {
            SandboxConfig::Fixture { timeout_s }
            | SandboxConfig::Socket { timeout_s, .. }
            | SandboxConfig::Stdio { timeout_s, .. } => *timeout_s,
        }
    }
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig::Fixture {
            timeout_s: default_exec_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDpoSection {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Hash buckets for prompts and actions in the toy adapter.
    #[serde(default = "default_contexts")]
    pub contexts: usize,
    #[serde(default = "default_actions")]
    pub actions: usize,
}

fn default_beta() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    200
}
fn default_contexts() -> usize {
    64
}
fn default_actions() -> usize {
    256
}

impl Default for ToyDpoSection {
    fn default() -> Self {
        ToyDpoSection {
            beta: default_beta(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            contexts: default_contexts(),
            actions: default_actions(),
        }
    }
}

impl ToyDpoSection {
    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    /// Per-role backends; a `default` entry covers roles not listed.
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    #[serde(default)]
    pub explore: ExploreConfig,
    #[serde(default)]
    pub dpo: ToyDpoSection,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve_paths(base_dir);
        let problems = cfg.violations();
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.workspace);
        fix(&mut self.run.seed_pool);
        fix(&mut self.run.registry);
        if let Some(p) = self.run.image_index.as_mut() {
            fix(p);
        }
        for b in self.backends.values_mut() {
            if let BackendConfig::Mock { fixtures } = b {
                fix(fixtures);
            }
        }
        if let SandboxConfig::Socket { address, .. } = &mut self.sandbox {
            fix(address);
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let r = &self.run;
        if r.iterations == 0 {
            v.push("run.iterations must be >= 1".into());
        }
        if r.d == 0 {
            v.push("run.d must be >= 1".into());
        }
        if r.seeds_per_call == 0 || r.workers == 0 || r.queries_per_call == 0 {
            v.push("run.seeds_per_call, run.workers and run.queries_per_call must be >= 1".into());
        }
        if r.tuning_hook.trim().is_empty() {
            v.push("run.tuning_hook must be \"toy\", \"none\" or a command".into());
        }
        for key in self.backends.keys() {
            if key != "default" && RoleTag::parse(key).is_none() {
                v.push(format!("unknown backend role {key:?}"));
            }
        }
        for role in RoleTag::ALL {
            if !self.backends.contains_key(role.as_str()) && !self.backends.contains_key("default") {
                v.push(format!("no backend for role {}", role.as_str()));
            }
        }
        v.extend(self.explore.violations(false).into_iter().map(|p| format!("explore: {p}")));
        if self.sandbox.timeout_s().is_nan() || self.sandbox.timeout_s() <= 0.0 {
            v.push("sandbox.timeout_s must be positive".into());
        }
        if let Err(e) = self.dpo.dpo_config().check() {
            v.push(format!("dpo: {e}"));
        }
        if self.dpo.contexts == 0 || self.dpo.actions < 2 {
            v.push("dpo.contexts must be >= 1 and dpo.actions >= 2".into());
        }
        v
    }

    /// Explore settings with the sandbox timeout and run seed applied.
    pub fn explore_config(&self) -> ExploreConfig {
        ExploreConfig {
            timeout_s: self.sandbox.timeout_s(),
            seed: self.run.rng_seed,
            ..self.explore.clone()
        }
    }

    fn backend_for(&self, role: RoleTag) -> &BackendConfig {
        self.backends
            .get(role.as_str())
            .or_else(|| self.backends.get("default"))
            .expect("validated: every role has a backend")
    }

    /// Human-readable plan printed by dry runs.
    pub fn describe(&self) -> String {
        let r = &self.run;
        let mut s = format!(
            "iterations={} d={} (up to {} trajectories) n={} max_steps={} seed={} workers={}\nworkspace: {}\n",
            r.iterations,
            r.d,
            r.iterations * r.d,
            self.explore.n_candidates,
            self.explore.max_steps,
            r.rng_seed,
            r.workers,
            r.workspace.display()
        );
        for role in RoleTag::ALL {
            let kind = match self.backend_for(role) {
                BackendConfig::Sim { .. } => "sim".to_string(),
                BackendConfig::Mock { fixtures } => format!("mock ({})", fixtures.display()),
                BackendConfig::Openai { endpoint, model, .. } => format!("openai {model} at {endpoint}"),
            };
            s.push_str(&format!("backend {}: {kind}\n", role.as_str()));
        }
        let sandbox = match &self.sandbox {
            SandboxConfig::Fixture { .. } => "fixture interpreter".to_string(),
            SandboxConfig::Socket { address, .. } => format!("socket {}", address.display()),
            SandboxConfig::Stdio { command, .. } => format!("stdio `{}`", command.join(" ")),
        };
        s.push_str(&format!("sandbox: {sandbox}\ntuning hook: {}\n", r.tuning_hook));
        s
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let mut g = Gateway::new().with_in_flight_limit(self.run.workers.max(1) * self.explore.n_candidates.max(1));
        let mut cache: BTreeMap<String, Arc<dyn ChatBackend>> = BTreeMap::new();
        for role in RoleTag::ALL {
            let key = if self.backends.contains_key(role.as_str()) {
                role.as_str()
            } else {
                "default"
            };
            let backend = match cache.get(key) {
                Some(b) => b.clone(),
                None => {
                    let b = self.make_backend(self.backend_for(role))?;
                    cache.insert(key.to_string(), b.clone());
                    b
                }
            };
            g = g.with_backend(role, backend);
        }
        Ok(g)
    }

    fn make_backend(&self, cfg: &BackendConfig) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        Ok(match cfg {
            BackendConfig::Sim { seed } => Arc::new(SimBackend::new(seed.unwrap_or(self.run.rng_seed))),
            BackendConfig::Mock { fixtures } => Arc::new(
                MockBackend::from_dir(fixtures)
                    .map_err(|e| ConfigError::Invalid(vec![format!("mock fixtures {}: {e}", fixtures.display())]))?,
            ),
            BackendConfig::Openai {
                endpoint,
                model,
                api_key_env,
                timeout_s,
                single_sample,
            } => {
                let b = OpenAiBackend::new(endpoint, model, api_key_env.as_deref(), Duration::from_secs_f64(*timeout_s));
                Arc::new(if *single_sample { b.single_sample_only() } else { b })
            }
        })
    }

    pub fn build_executor(&self) -> Result<Box<dyn Executor>, crate::executor::ExecError> {
        Ok(match &self.sandbox {
            SandboxConfig::Fixture { .. } => Box::new(FixtureExecutor::new()),
            SandboxConfig::Socket { address, hard_cap_s, .. } => Box::new(SocketExecutor::new(address, *hard_cap_s)),
            SandboxConfig::Stdio { command, hard_cap_s, .. } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| crate::executor::ExecError::InvalidRequest("empty sandbox command".into()))?;
                Box::new(StdioExecutor::spawn(program, args, *hard_cap_s)?)
            }
        })
    }

    pub fn load_registry(&self) -> Result<ToolRegistrySpec, ConfigError> {
        let path = &self.run.registry;
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        let reg: ToolRegistrySpec = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(vec![format!("registry {}: {e}", path.display())]))?;
        let problems = reg.violations();
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
iterations = 2
d = 3
workspace = "work"
seed_pool = "seeds.jsonl"
registry = "registry.json"

[backends.default]
kind = "sim"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.run.seeds_per_call, 20);
        assert_eq!(cfg.explore.n_candidates, 5);
        assert_eq!(cfg.dpo.beta, 0.1);
        assert_eq!(cfg.sandbox.timeout_s(), 30.0);
        assert_eq!(cfg.run.workspace, Path::new("/base/work"));
        assert!(cfg.build_gateway().is_ok());
    }

    #[test]
    fn zero_d_is_invalid() {
        let text = MINIMAL.replace("d = 3", "d = 0");
        assert!(matches!(RunConfig::parse(&text, Path::new(".")), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_role_backend_is_invalid() {
        let text = MINIMAL.replace("[backends.default]", "[backends.controller]");
        match RunConfig::parse(&text, Path::new(".")) {
            Err(ConfigError::Invalid(v)) => assert!(v.iter().any(|p| p.contains("verifier"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("d = 3", "d = 3\ncolour = 1");
        assert!(matches!(RunConfig::parse(&text, Path::new(".")), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn openai_and_socket_sections_parse() {
        let text = format!(
            "{MINIMAL}\n[backends.verifier]\nkind = \"openai\"\nendpoint = \"http://localhost:8000/v1\"\nmodel = \"m\"\napi_key_env = \"KEY\"\n\n[sandbox]\nkind = \"socket\"\naddress = \"/tmp/sb.sock\"\n"
        );
        let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
        assert!(matches!(cfg.backends["verifier"], BackendConfig::Openai { .. }));
        assert!(cfg.describe().contains("socket /tmp/sb.sock"));
    }
}
