//! The outer loop: per iteration, synthesize tasks, explore them until `d`
//! trajectories complete, turn the trajectories into a fresh preference
//! dataset, export it and hand it to the tuning hook.
//!
//! Workspace layout: `tasks/iter_<k>.jsonl` and `tasks/iter_<k>/<task>/`
//! (task files), `trajectories/iter_<k>/<task>.json`,
//! `datasets/iter_<k>/`, `reports/iter_<k>.json` (written last; its
//! presence marks the iteration complete) and `reports/summary.json`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::canonical;
use crate::config::{ConfigError, RunConfig};
use crate::dpo::{self, ToyPolicy};
use crate::executor::{ExecError, Executor};
use crate::explorer::{ExploreError, Explorer};
use crate::gateway::{derive_seed, Gateway, GatewayError};
use crate::model::{Task, TaskStatus, ToolRegistrySpec, Trajectory};
use crate::stats::{self, DiagnosticsReport};
use crate::store::{build_pairs, write_atomic, PreferenceStore, StoreError};
use crate::taskforge::{FixtureImageIndex, ForgeConfig, ForgeError, ImageRetriever, SeedPool, TaskForge};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("backend failure: {0}")]
    FatalBackendFailure(String),
    #[error("sandbox unavailable: {0}")]
    SandboxDown(#[from] ExecError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("tuning hook failed: {0}")]
    Hook(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] crate::CoreError),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<GatewayError> for RunError {
    fn from(e: GatewayError) -> Self {
        RunError::FatalBackendFailure(e.to_string())
    }
}

impl From<ForgeError> for RunError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Core(c) => RunError::Core(c),
            other => RunError::FatalBackendFailure(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookOutcome {
    pub kind: String,
    pub pairs_used: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub drafts: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub completed: usize,
    pub aborted: usize,
    pub pair_count: usize,
    pub dataset_digest: String,
    pub diagnostics: Option<DiagnosticsReport>,
    pub hook: HookOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: Vec<IterationSummary>,
    pub total_completed: usize,
    pub total_pairs: usize,
}

/// Outcome of exploring one iteration's tasks.
#[derive(Debug, Clone, Default)]
pub struct ExploreOutcome {
    /// Completed and aborted trajectories in exploration order.
    pub trajectories: Vec<Trajectory>,
    pub completed: usize,
    pub aborted: usize,
}

/// Applies `f` to every item on up to `workers` threads; results keep the
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn tasks_file(&self, k: usize) -> PathBuf {
        self.root.join("tasks").join(format!("iter_{k}.jsonl"))
    }

    pub fn task_dir(&self, k: usize, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(format!("iter_{k}")).join(task_id)
    }

    pub fn trajectory_file(&self, k: usize, task_id: &str) -> PathBuf {
        self.root
            .join("trajectories")
            .join(format!("iter_{k}"))
            .join(format!("{task_id}.json"))
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn report_file(&self, k: usize) -> PathBuf {
        self.root.join("reports").join(format!("iter_{k}.json"))
    }

    pub fn loss_csv(&self, k: usize) -> PathBuf {
        self.root.join("reports").join(format!("iter_{k}_loss.csv"))
    }

    pub fn summary_file(&self) -> PathBuf {
        self.root.join("reports").join("summary.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = canonical::to_canonical_bytes(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    Ok(canonical::deserialize(&std::fs::read(path)?)?)
}

pub struct Orchestrator<'a> {
    pub cfg: &'a RunConfig,
    pub gateway: &'a Gateway,
    pub executor: &'a dyn Executor,
    pub registry: &'a ToolRegistrySpec,
    pub pool: &'a SeedPool,
    pub retriever: &'a dyn ImageRetriever,
    pub workspace: Workspace,
}

impl<'a> Orchestrator<'a> {
    fn forge(&self) -> TaskForge<'_> {
        TaskForge {
            gateway: self.gateway,
            executor: self.executor,
            registry: self.registry,
            retriever: self.retriever,
            cfg: ForgeConfig {
                seeds_per_call: self.cfg.run.seeds_per_call,
                exec_timeout_s: self.cfg.sandbox.timeout_s(),
                ..ForgeConfig::default()
            },
        }
    }

    pub fn explorer(&self) -> Explorer<'_> {
        Explorer {
            gateway: self.gateway,
            executor: self.executor,
            registry: self.registry,
            cfg: self.cfg.explore_config(),
        }
    }

    /// Generates 2·d drafts and runs each through planning, file
    /// materialization, revision and filtering. Reuses the persisted task
    /// list when present.
    pub fn synthesize(&self, k: usize) -> Result<Vec<Task>, RunError> {
        let path = self.workspace.tasks_file(k);
        if path.exists() {
            return Ok(canonical::from_ndjson(&std::fs::read_to_string(&path)?)?);
        }
        let target = 2 * self.cfg.run.d;
        let per_call = self.cfg.run.queries_per_call;
        let max_calls = 2 * target.div_ceil(per_call) + 2;
        let forge = self.forge();
        let mut drafts = Vec::new();
        for call in 0..max_calls {
            if drafts.len() >= target {
                break;
            }
            let seed = derive_seed(self.cfg.run.rng_seed, (k * 10_000 + call) as u64);
            drafts.extend(forge.generate_queries(self.pool, per_call.min(target - drafts.len()), seed)?);
        }
        for (i, t) in drafts.iter_mut().enumerate() {
            t.id = format!("it{k}-t{i:03}");
        }
        let processed = parallel_map(&drafts, self.cfg.run.workers, |t| {
            forge.process_draft(t, &self.workspace.task_dir(k, &t.id))
        });
        let tasks = processed.into_iter().collect::<Result<Vec<_>, _>>()?;
        let bytes = canonical::to_ndjson(&tasks)?;
        std::fs::create_dir_all(path.parent().expect("tasks file has a parent"))?;
        write_atomic(&path, &bytes)?;
        info!(
            iteration = k,
            drafts = tasks.len(),
            accepted = tasks.iter().filter(|t| t.status == TaskStatus::Accepted).count(),
            "synthesized tasks"
        );
        Ok(tasks)
    }

    fn explore_one(&self, k: usize, task: &Task) -> Result<Trajectory, RunError> {
        let path = self.workspace.trajectory_file(k, &task.id);
        if path.exists() {
            return read_json(&path);
        }
        let workspace = self.workspace.task_dir(k, &task.id);
        std::fs::create_dir_all(&workspace)?;
        let traj = match self.explorer().explore_task(task, &workspace) {
            Ok(t) => t,
            Err(ExploreError::TaskAborted { partial, reason, .. }) => {
                warn!(task = %task.id, ?reason, "task aborted");
                *partial
            }
            Err(ExploreError::Gateway(e)) => return Err(e.into()),
            Err(e) => return Err(RunError::FatalBackendFailure(e.to_string())),
        };
        write_json(&path, &traj)?;
        Ok(traj)
    }

    /// Explores accepted tasks in order until `d` complete; aborted tasks
    /// count as attempts only.
    pub fn explore(&self, k: usize, tasks: &[Task]) -> Result<ExploreOutcome, RunError> {
        let accepted: Vec<&Task> = tasks.iter().filter(|t| t.status == TaskStatus::Accepted).collect();
        let d = self.cfg.run.d;
        let mut out = ExploreOutcome::default();
        let mut next = 0;
        while out.completed < d && next < accepted.len() {
            let take = self.cfg.run.workers.min(d - out.completed).min(accepted.len() - next);
            let chunk = &accepted[next..next + take];
            next += take;
            for r in parallel_map(chunk, self.cfg.run.workers, |t| self.explore_one(k, t)) {
                let traj = r?;
                if traj.aborted.is_some() {
                    out.aborted += 1;
                } else {
                    out.completed += 1;
                }
                out.trajectories.push(traj);
            }
        }
        Ok(out)
    }

    /// Builds pairs from every trajectory and appends them to iteration
    /// `k`'s dataset.
    pub fn build_dataset(&self, k: usize, trajectories: &[Trajectory]) -> Result<PreferenceStore, RunError> {
        let store = PreferenceStore::new(self.workspace.datasets());
        store.append(&[], k)?;
        for t in trajectories {
            store.append(&build_pairs(t), k)?;
        }
        Ok(store)
    }

    fn tune(&self, k: usize, export: &Path) -> Result<HookOutcome, RunError> {
        let hook = self.cfg.run.tuning_hook.trim();
        match hook {
            "none" => Ok(HookOutcome {
                kind: "none".into(),
                pairs_used: 0,
                initial_loss: None,
                final_loss: None,
            }),
            "toy" => {
                let d = &self.cfg.dpo;
                let text = std::fs::read_to_string(export)?;
                let pairs = dpo::toy_pairs_from_export(&text, d.contexts, d.actions)
                    .map_err(|e| RunError::Hook(e.to_string()))?;
                if pairs.is_empty() {
                    return Ok(HookOutcome {
                        kind: "toy".into(),
                        pairs_used: 0,
                        initial_loss: None,
                        final_loss: None,
                    });
                }
                let initial = ToyPolicy::uniform(d.contexts, d.actions);
                let out = dpo::toy_train(&initial, &pairs, &d.dpo_config()).map_err(|e| RunError::Hook(e.to_string()))?;
                let final_loss = dpo::toy_loss(&out.policy, &initial, &pairs, d.beta).map_err(|e| RunError::Hook(e.to_string()))?;
                let mut csv = Vec::new();
                dpo::write_trace_csv(&out.trace, &mut csv).map_err(|e| RunError::Hook(e.to_string()))?;
                let csv_path = self.workspace.loss_csv(k);
                std::fs::create_dir_all(csv_path.parent().expect("reports dir"))?;
                write_atomic(&csv_path, &csv)?;
                Ok(HookOutcome {
                    kind: "toy".into(),
                    pairs_used: pairs.len(),
                    initial_loss: out.trace.first().copied(),
                    final_loss: Some(final_loss),
                })
            }
            command => {
                let status = std::process::Command::new("sh")
                    .arg("-c")
                    .arg(command)
                    .arg("stepwise-hook")
                    .arg(export)
                    .current_dir(&self.workspace.root)
                    .status()?;
                if !status.success() {
                    return Err(RunError::Hook(format!("`{command}` exited with {status}")));
                }
                Ok(HookOutcome {
                    kind: "command".into(),
                    pairs_used: 0,
                    initial_loss: None,
                    final_loss: None,
                })
            }
        }
    }

    pub fn run_iteration(&self, k: usize) -> Result<IterationSummary, RunError> {
        let report = self.workspace.report_file(k);
        if report.exists() {
            info!(iteration = k, "iteration already complete");
            return read_json(&report);
        }
        let tasks = self.synthesize(k)?;
        let explored = self.explore(k, &tasks)?;
        let store = self.build_dataset(k, &explored.trajectories)?;
        let export = store.export_training_file(k)?;
        let manifest = store.manifest(k)?.expect("dataset was just written");
        let pairs = store.load_pairs(k)?;
        let diagnostics = if pairs.is_empty() {
            None
        } else {
            Some(stats::report(&pairs, self.registry).expect("non-empty dataset"))
        };
        let hook = self.tune(k, &export)?;
        let summary = IterationSummary {
            iteration: k,
            drafts: tasks.len(),
            accepted: tasks.iter().filter(|t| t.status == TaskStatus::Accepted).count(),
            rejected: tasks.iter().filter(|t| t.status == TaskStatus::Rejected).count(),
            completed: explored.completed,
            aborted: explored.aborted,
            pair_count: manifest.pair_count,
            dataset_digest: manifest.content_digest,
            diagnostics,
            hook,
        };
        write_json(&report, &summary)?;
        info!(iteration = k, completed = summary.completed, pairs = summary.pair_count, "iteration complete");
        Ok(summary)
    }

    pub fn run_all(&self) -> Result<RunSummary, RunError> {
        let mut iterations = Vec::new();
        for k in 0..self.cfg.run.iterations {
            iterations.push(self.run_iteration(k)?);
        }
        let summary = RunSummary {
            total_completed: iterations.iter().map(|s| s.completed).sum(),
            total_pairs: iterations.iter().map(|s| s.pair_count).sum(),
            iterations,
        };
        write_json(&self.workspace.summary_file(), &summary)?;
        Ok(summary)
    }
}

/// Loads the seed pool and image index named by the config.
pub fn load_inputs(cfg: &RunConfig, registry: &ToolRegistrySpec) -> Result<(SeedPool, FixtureImageIndex), RunError> {
    let seed_path = &cfg.run.seed_pool;
    let text = std::fs::read_to_string(seed_path).map_err(|source| ConfigError::Read {
        path: seed_path.clone(),
        source,
    })?;
    let tag = seed_path
        .file_name()
        .map_or_else(|| "seeds".to_string(), |n| n.to_string_lossy().into_owned());
    let pool = SeedPool::from_ndjson(&text, tag).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
    let problems = pool.violations(registry);
    if !problems.is_empty() {
        return Err(ConfigError::Invalid(problems).into());
    }
    let index = match &cfg.run.image_index {
        Some(dir) => FixtureImageIndex::load(dir).map_err(|e| ConfigError::Invalid(vec![format!("image index: {e}")]))?,
        None => FixtureImageIndex::empty(),
    };
    Ok((pool, index))
}

/// Everything a run needs that is built once from the config.
pub struct RunContext {
    pub gateway: Gateway,
    pub executor: Box<dyn Executor>,
    pub registry: ToolRegistrySpec,
    pub pool: SeedPool,
    pub index: FixtureImageIndex,
}

impl RunContext {
    /// Loads inputs, builds backends and the sandbox client, and checks the
    /// sandbox is reachable.
    pub fn build(cfg: &RunConfig) -> Result<RunContext, RunError> {
        let registry = cfg.load_registry()?;
        let (pool, index) = load_inputs(cfg, &registry)?;
        let gateway = cfg.build_gateway()?;
        let executor = cfg.build_executor()?;
        executor.health()?;
        Ok(RunContext {
            gateway,
            executor,
            registry,
            pool,
            index,
        })
    }

    pub fn orchestrator<'a>(&'a self, cfg: &'a RunConfig) -> Orchestrator<'a> {
        Orchestrator {
            cfg,
            gateway: &self.gateway,
            executor: self.executor.as_ref(),
            registry: &self.registry,
            pool: &self.pool,
            retriever: &self.index,
            workspace: Workspace {
                root: cfg.run.workspace.clone(),
            },
        }
    }
}

/// Runs every configured iteration end to end.
pub fn run_loop(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let ctx = RunContext::build(cfg)?;
    ctx.orchestrator(cfg).run_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        let out = parallel_map(&items, 7, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<usize>::new(), 3, |x| *x).is_empty());
    }

    #[test]
    fn config_errors_exit_with_two() {
        assert_eq!(RunError::Config(ConfigError::Invalid(vec![])).exit_code(), 2);
        assert_eq!(RunError::Hook("x".into()).exit_code(), 1);
    }
}
