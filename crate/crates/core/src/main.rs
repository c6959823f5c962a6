use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::error;

use stepwise_core::config::RunConfig;
use stepwise_core::dpo::{self, DpoConfig, PairLogProbs, ToyPair, ToyPolicy};
use stepwise_core::explorer::ExploreError;
use stepwise_core::orchestrator::{RunContext, RunError, Workspace};
use stepwise_core::store::PreferenceStore;
use stepwise_core::{canonical, stats, Task, TaskStatus};

#[derive(Parser)]
#[command(name = "stepwise", version, about = "Step-wise preference data generation and toy DPO tuning")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Validate inputs and print the plan without calling any backend.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured iteration.
    Run,
    /// Synthesize and filter tasks for one iteration.
    Synth {
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Explore the accepted tasks of one iteration.
    Explore {
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Build and export the preference dataset from persisted trajectories.
    Pairs {
        #[arg(long, default_value_t = 0)]
        iteration: usize,
    },
    /// Print diagnostics of an iteration's dataset.
    Stats {
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Also write the tool histogram as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Answer one query with the verifier-free controller.
    Infer {
        #[arg(long)]
        query: String,
        /// Comma-separated tool hints.
        #[arg(long, value_delimiter = ',')]
        tools: Vec<String>,
    },
    /// Check the loss identity and the analytic gradient on random instances.
    DpoCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train the toy policy on planted preferences.
    ToyTrain {
        #[arg(long, default_value_t = 20)]
        contexts: usize,
        #[arg(long, default_value_t = 4)]
        actions: usize,
        /// Write the per-epoch loss trace as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(e) => e.exit_code() as u8,
            CliError::Failed(_) => 1,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path).map_err(RunError::from)?;
    if let Some(seed) = cli.seed {
        cfg.run.rng_seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(failed)?);
    Ok(())
}

fn dry_run(cfg: &RunConfig) -> Result<(), CliError> {
    let registry = cfg.load_registry().map_err(RunError::from)?;
    let (pool, _) = stepwise_core::orchestrator::load_inputs(cfg, &registry)?;
    print!("{}", cfg.describe());
    println!("{} seeds, {} tools; dry run, nothing executed", pool.seeds.len(), registry.tools.len());
    Ok(())
}

fn read_tasks(ws: &Workspace, k: usize) -> Result<Vec<Task>, CliError> {
    let path = ws.tasks_file(k);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Failed(format!("{}: {e} (run `synth` first)", path.display())))?;
    canonical::from_ndjson(&text).map_err(failed)
}

fn read_trajectories(ws: &Workspace, k: usize, tasks: &[Task]) -> Result<Vec<stepwise_core::Trajectory>, CliError> {
    let mut out = Vec::new();
    for t in tasks {
        let path = ws.trajectory_file(k, &t.id);
        if path.exists() {
            out.push(canonical::deserialize(&std::fs::read(&path).map_err(failed)?).map_err(failed)?);
        }
    }
    Ok(out)
}

fn dpo_check(instances: usize, seed: u64) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identity = 0.0f64;
    for _ in 0..instances {
        let lp = PairLogProbs::new(
            rng.gen_range(-30.0..0.0),
            rng.gen_range(-30.0..0.0),
            rng.gen_range(-30.0..0.0),
            rng.gen_range(-30.0..0.0),
        );
        let beta = rng.gen_range(0.01..1.0);
        let m = dpo::pair_margin(&lp, beta).map_err(failed)?;
        let loss = dpo::pair_loss(&lp, beta).map_err(failed)?.loss;
        identity = identity.max((loss + dpo::sigmoid(m).ln()).abs());
    }
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (contexts, actions) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let logits = |rng: &mut ChaCha8Rng| (0..contexts * actions).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let policy = ToyPolicy::from_logits(contexts, actions, logits(&mut rng)).map_err(failed)?;
        let reference = ToyPolicy::from_logits(contexts, actions, logits(&mut rng)).map_err(failed)?;
        let pairs: Vec<ToyPair> = (0..rng.gen_range(1..8))
            .map(|_| {
                let preferred = rng.gen_range(0..actions);
                ToyPair {
                    context: rng.gen_range(0..contexts),
                    preferred,
                    dispreferred: (preferred + rng.gen_range(1..actions)) % actions,
                }
            })
            .collect();
        let beta = rng.gen_range(0.05..1.0);
        let analytic = dpo::toy_grad(&policy, &reference, &pairs, beta).map_err(failed)?;
        let numeric = dpo::toy_grad_fd(&policy, &reference, &pairs, beta, 1e-6).map_err(failed)?;
        worst = worst.max(dpo::max_relative_error(&analytic, &numeric));
    }
    println!("identity max abs error: {identity:.3e}");
    println!("gradient max relative error: {worst:.3e}");
    if identity > 1e-12 || worst >= 1e-6 {
        return Err(CliError::Failed("dpo check failed".into()));
    }
    println!("ok");
    Ok(())
}

fn toy_train(contexts: usize, actions: usize, seed: u64, cfg: &DpoConfig, out: Option<&Path>) -> Result<(), CliError> {
    if contexts == 0 || actions < 2 {
        return Err(CliError::Usage("need at least 1 context and 2 actions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<usize> = (0..contexts).map(|_| rng.gen_range(0..actions)).collect();
    let pairs = dpo::planted_pairs(&planted, actions);
    let result = dpo::toy_train(&ToyPolicy::uniform(contexts, actions), &pairs, cfg).map_err(failed)?;
    if let Some(path) = out {
        let file = std::fs::File::create(path).map_err(failed)?;
        dpo::write_trace_csv(&result.trace, file).map_err(failed)?;
    }
    println!(
        "epochs={} first_loss={:.6} last_loss={:.6} accuracy={:.3}",
        result.trace.len(),
        result.trace.first().copied().unwrap_or(f64::NAN),
        result.trace.last().copied().unwrap_or(f64::NAN),
        dpo::planted_accuracy(&result.policy, &planted)
    );
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::DpoCheck { instances } => {
            if cli.dry_run {
                println!("would check {instances} instances");
                return Ok(());
            }
            dpo_check(*instances, cli.seed.unwrap_or(0))
        }
        Command::ToyTrain { contexts, actions, out } => {
            let dcfg = match &cli.config {
                Some(_) => load_config(cli)?.dpo.dpo_config(),
                None => DpoConfig::default(),
            };
            dcfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
            if cli.dry_run {
                println!("would train {contexts}x{actions} for {} epochs", dcfg.epochs);
                return Ok(());
            }
            toy_train(*contexts, *actions, cli.seed.unwrap_or(0), &dcfg, out.as_deref())
        }
        Command::Stats { iteration, csv } => {
            let cfg = load_config(cli)?;
            if cli.dry_run {
                return dry_run(&cfg);
            }
            let registry = cfg.load_registry().map_err(RunError::from)?;
            let ws = Workspace {
                root: cfg.run.workspace.clone(),
            };
            let pairs = PreferenceStore::new(ws.datasets()).load_pairs(*iteration).map_err(RunError::from)?;
            let report = stats::report(&pairs, &registry).map_err(failed)?;
            if let Some(path) = csv {
                let file = std::fs::File::create(path).map_err(failed)?;
                stats::write_tool_csv(&report, file).map_err(failed)?;
            }
            print_json(&report)
        }
        Command::Pairs { iteration } => {
            let cfg = load_config(cli)?;
            if cli.dry_run {
                return dry_run(&cfg);
            }
            let ctx = RunContext::build(&cfg)?;
            let orch = ctx.orchestrator(&cfg);
            let tasks = read_tasks(&orch.workspace, *iteration)?;
            let trajectories = read_trajectories(&orch.workspace, *iteration, &tasks)?;
            let store = orch.build_dataset(*iteration, &trajectories)?;
            let export = store.export_training_file(*iteration).map_err(RunError::from)?;
            let manifest = store.manifest(*iteration).map_err(RunError::from)?;
            println!(
                "{} pairs from {} trajectories -> {}",
                manifest.map_or(0, |m| m.pair_count),
                trajectories.len(),
                export.display()
            );
            Ok(())
        }
        command => {
            let cfg = load_config(cli)?;
            if cli.dry_run {
                return dry_run(&cfg);
            }
            let ctx = RunContext::build(&cfg)?;
            let orch = ctx.orchestrator(&cfg);
            match command {
                Command::Run => print_json(&orch.run_all()?),
                Command::Synth { iteration } => {
                    let tasks = orch.synthesize(*iteration)?;
                    let accepted = tasks.iter().filter(|t| t.status == TaskStatus::Accepted).count();
                    println!("{} drafts, {accepted} accepted", tasks.len());
                    Ok(())
                }
                Command::Explore { iteration } => {
                    let tasks = read_tasks(&orch.workspace, *iteration)?;
                    let out = orch.explore(*iteration, &tasks)?;
                    println!("{} completed, {} aborted", out.completed, out.aborted);
                    Ok(())
                }
                Command::Infer { query, tools } => {
                    let mut task = Task::draft("infer", query.clone(), tools.clone());
                    task.advance(TaskStatus::Revised).map_err(failed)?;
                    task.advance(TaskStatus::Accepted).map_err(failed)?;
                    let dir = orch.workspace.root.join("infer");
                    std::fs::create_dir_all(&dir).map_err(failed)?;
                    let mut explorer = orch.explorer();
                    explorer.cfg.n_candidates = 1;
                    let traj = match explorer.infer_task(&task, &dir) {
                        Ok(t) => t,
                        Err(ExploreError::TaskAborted { partial, .. }) => *partial,
                        Err(e) => return Err(failed(e)),
                    };
                    print_json(&traj)
                }
                _ => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
