//! Command-line entry point: query generation, rollouts, judgment, pipeline
//! iterations, training, evaluation, and report merging. Flags override the
//! JSON config file, which overrides built-in defaults; OWLSIM_SEED is the
//! fallback seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    run_episode, run_episode_e2e, EpisodeConfig, KnowledgeTable, LearnedDriver, RemoteBackend,
    RoleBackends,
};
use crate::fixtures;
use crate::gui_sim::{load_app_graph, Env, World};
use crate::judgment::{judge_trajectory, JudgedTrajectory, VerdictRecord};
use crate::pipeline::{
    rollout_e2e, rollout_role, run_pipeline, PipelineConfig, RolloutMode, TrajectoryStore,
};
use crate::taskgen::{generate_pool, TaskQuery};
use crate::trajectory::{render_trace, Trajectory};
use crate::trpo::policy::fnv1a64;
use crate::trpo::{
    render_metrics_csv, train, Checkpoint, PolicyParams, TrainConfig, TrainMode, METRICS_HEADER,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "owlsim", about = "Simulated GUI-agent testbed", version)]
pub struct Cli {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a validated task pool from the installed app graphs.
    GenQueries(GenQueriesArgs),
    /// Roll out judged episodes for a pool.
    Rollout(RolloutArgs),
    /// Re-judge stored trajectories against a pool.
    Judge(JudgeArgs),
    /// Self-evolving data pipeline.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Train the toy policy with one of the three trainer modes.
    Train(TrainArgs),
    /// Evaluate a backend or trained policy over a pool.
    Eval(EvalArgs),
    /// Merge training metrics files into plot-ready aggregates.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    Run(PipelineRunArgs),
}

/// Optional values loaded from --config; every field can be overridden by a
/// flag and falls back to a built-in default.
#[derive(Debug, Default, Clone, Deserialize)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub t_max: Option<u32>,
    pub k_history: Option<usize>,
    pub group_size: Option<usize>,
    pub tau_c: Option<f64>,
    pub eps_clip: Option<f64>,
    pub eps_adv: Option<f64>,
    pub delta: Option<f64>,
    pub lr: Option<f64>,
    pub backend: Option<String>,
    pub mode: Option<String>,
    pub apps_dir: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var("OWLSIM_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map_err(|_| usage(format!("OWLSIM_SEED is not an integer: {text:?}"))),
        Err(_) => Ok(0),
    }
}

/// Loads app graphs from a directory of JSON files, or the built-in fixture
/// apps when no directory is given.
pub fn load_world(apps_dir: Option<&Path>) -> anyhow::Result<Arc<World>> {
    let dir = match apps_dir {
        None => return Ok(fixtures::fixture_world()),
        Some(d) => d,
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading apps dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    entries.sort();
    anyhow::ensure!(!entries.is_empty(), "no .json app graphs in {}", dir.display());
    let mut world = World::new();
    for path in entries {
        let text = fs::read_to_string(&path)?;
        let graph = load_app_graph(&text)
            .with_context(|| format!("loading app graph {}", path.display()))?;
        world.install(graph);
    }
    Ok(Arc::new(world))
}

/// Exclusive ownership of an output directory for the duration of a run.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".owlsim.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("output dir {} is locked by another run ({})", dir.display(), path.display())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn read_pool(path: &Path) -> Result<Vec<TaskQuery>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read pool {}: {e}", path.display())))?;
    let pool: Vec<TaskQuery> = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(anyhow!("invalid pool {}: {e}", path.display())))?;
    if pool.is_empty() {
        return Err(CliError::Runtime(anyhow!("pool {} is empty", path.display())));
    }
    Ok(pool)
}

fn write_file(path: &Path, content: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn load_policy(checkpoint: Option<&Path>) -> Result<PolicyParams, CliError> {
    match checkpoint {
        None => Ok(PolicyParams::new(2048, 1.0)),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read checkpoint {}: {e}", p.display())))?;
            let ck: Checkpoint = serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(anyhow!("invalid checkpoint: {e}")))?;
            ck.into_policy().map_err(CliError::Runtime)
        }
    }
}

/// Backend selector grammar: oracle | noisy:RHO | learned | remote:URL.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Oracle,
    Noisy(f64),
    Learned,
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "oracle" {
            return Ok(BackendSpec::Oracle);
        }
        if s == "learned" {
            return Ok(BackendSpec::Learned);
        }
        if let Some(rho) = s.strip_prefix("noisy:") {
            let rho: f64 =
                rho.parse().map_err(|_| format!("bad noise rate in {s:?}"))?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(format!("noise rate out of [0,1]: {rho}"));
            }
            return Ok(BackendSpec::Noisy(rho));
        }
        if let Some(url) = s.strip_prefix("remote:") {
            return Ok(BackendSpec::Remote(url.to_string()));
        }
        Err(format!("unknown backend {s:?} (oracle | noisy:RHO | learned | remote:URL)"))
    }
}

fn role_backends(
    spec: &BackendSpec,
    task: &TaskQuery,
    world: &Arc<World>,
    seed: u64,
) -> Result<RoleBackends, CliError> {
    match spec {
        BackendSpec::Oracle => Ok(RoleBackends::oracle(task, world.clone())),
        BackendSpec::Noisy(rho) => {
            Ok(RoleBackends::noisy_worker(task, world.clone(), *rho, seed))
        }
        BackendSpec::Remote(url) => Ok(RoleBackends {
            manager: Box::new(RemoteBackend::new(url.clone())),
            worker: Box::new(RemoteBackend::new(url.clone())),
            reflector: Box::new(RemoteBackend::new(url.clone())),
            notetaker: Box::new(RemoteBackend::new(url.clone())),
        }),
        BackendSpec::Learned => {
            Err(usage("backend 'learned' runs end-to-end mode, not role mode"))
        }
    }
}

fn parse_train_mode(s: &str) -> Result<TrainMode, CliError> {
    match s {
        "trpo_full" => Ok(TrainMode::TrpoFull),
        "online_filter" => Ok(TrainMode::OnlineFilter),
        "offline_filter" => Ok(TrainMode::OfflineFilter),
        other => Err(usage(format!(
            "unknown train mode {other:?} (trpo_full | online_filter | offline_filter)"
        ))),
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Debug, Args)]
pub struct GenQueriesArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum sampled path length (screens).
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_queries(args: &GenQueriesArgs, file: &FileConfig) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, file)?;
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = generate_pool(&world, args.count.unwrap_or(20), seed, args.max_len.unwrap_or(4))
        .map_err(|e| CliError::Runtime(e.into()))?;
    let mut text = serde_json::to_string_pretty(&pool).expect("pool serializes");
    text.push('\n');
    write_file(&args.out, &text)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// e2e (policy) or role (orchestrated loop).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub k_history: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_rollout(args: &RolloutArgs, file: &FileConfig) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed, file)?;
    let t_max = pick(args.t_max, file.t_max, 15);
    let k_history = pick(args.k_history, file.k_history, 3);
    let group_size = pick(args.group_size, file.group_size, 4);
    let mode = args.mode.clone().or(file.mode.clone()).unwrap_or_else(|| "e2e".to_string());
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = read_pool(&args.pool)?;
    let _lock = DirLock::acquire(&args.out)?;

    let batch = match mode.as_str() {
        "e2e" => {
            let policy = load_policy(args.checkpoint.as_deref())?;
            rollout_e2e(&world, &pool, &policy, group_size, k_history, t_max, seed, 0)
        }
        "role" => {
            let backend: BackendSpec = args
                .backend
                .as_deref()
                .or(file.backend.as_deref())
                .unwrap_or("oracle")
                .parse()
                .map_err(usage)?;
            if backend == BackendSpec::Learned {
                return Err(usage("backend 'learned' requires --mode e2e"));
            }
            rollout_role(
                &world,
                &pool,
                |task, _, ep_seed| {
                    role_backends(&backend, task, &world, ep_seed)
                        .expect("non-learned backend validated above")
                },
                group_size,
                t_max,
                seed,
                0,
            )
        }
        other => return Err(usage(format!("unknown rollout mode {other:?} (e2e | role)"))),
    };

    let mut lines = String::new();
    for judged in &batch.trajectories {
        lines.push_str(&serde_json::to_string(judged).expect("trajectory serializes"));
        lines.push('\n');
    }
    write_file(&args.out.join("trajectories.jsonl"), &lines)?;
    for judged in &batch.trajectories {
        let path = args.out.join("traces").join(format!("{}.jsonl", sanitize(&judged.traj.traj_id)));
        write_file(&path, &render_trace(&judged.traj))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// JSONL of trajectories (bare or judged records).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_judge(args: &JudgeArgs, file: &FileConfig) -> Result<(), CliError> {
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = read_pool(&args.pool)?;
    let by_id: BTreeMap<&str, &TaskQuery> =
        pool.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let text = fs::read_to_string(&args.input)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.input.display())))?;
    let mut out = String::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = match serde_json::from_str::<JudgedTrajectory>(line) {
            Ok(j) => j.traj,
            Err(_) => serde_json::from_str(line).map_err(|e| {
                CliError::Runtime(anyhow!("line {}: not a trajectory: {e}", ln + 1))
            })?,
        };
        let task = by_id.get(traj.task_id.as_str()).ok_or_else(|| {
            CliError::Runtime(anyhow!("line {}: unknown task {}", ln + 1, traj.task_id))
        })?;
        let verdict = judge_trajectory(&world, task, &traj);
        let record = VerdictRecord {
            task_id: traj.task_id.clone(),
            traj_id: traj.traj_id.clone(),
            text_channel: verdict.text_channel,
            multimodal_channel: verdict.multimodal_channel,
            consensus: verdict.consensus,
            step_labels: verdict.step_labels,
        };
        out.push_str(&serde_json::to_string(&record).expect("verdict serializes"));
        out.push('\n');
    }
    write_file(&args.out, &out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineRunArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub iters: Option<u32>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// e2e | role | both.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub k_history: Option<usize>,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_pipeline_run(args: &PipelineRunArgs, file: &FileConfig) -> Result<(), CliError> {
    let mode = match args.mode.as_deref().or(file.mode.as_deref()).unwrap_or("both") {
        "e2e" => RolloutMode::E2E,
        "role" => RolloutMode::Role,
        "both" => RolloutMode::Both,
        other => return Err(usage(format!("unknown pipeline mode {other:?} (e2e | role | both)"))),
    };
    let defaults = PipelineConfig::default();
    let cfg = PipelineConfig {
        mode,
        group_size: pick(args.group_size, file.group_size, defaults.group_size),
        iterations: args.iters.unwrap_or(defaults.iterations),
        seed: resolve_seed(args.seed, file)?,
        t_max: pick(args.t_max, file.t_max, defaults.t_max),
        k_history: pick(args.k_history, file.k_history, defaults.k_history),
        tau_c: pick(args.tau_c, file.tau_c, defaults.tau_c),
        delta: pick(args.delta, file.delta, defaults.delta),
        lr: pick(args.lr, file.lr, defaults.lr),
        ..defaults
    };
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = read_pool(&args.pool)?;
    let _lock = DirLock::acquire(&args.out)?;

    // Fresh store per run so rerunning the same directory yields identical
    // artifacts; the store is append-only within a run.
    let store_path = args.out.join("trajectories.jsonl");
    if store_path.exists() {
        fs::remove_file(&store_path).map_err(|e| CliError::Runtime(e.into()))?;
    }
    let store = TrajectoryStore::new(store_path);
    let run = run_pipeline(&world, &pool, &cfg, Some(&store))
        .map_err(|e| CliError::Runtime(e.into()))?;

    write_file(&args.out.join("stats.csv"), &run.stats_csv)?;
    for (k, dataset) in run.datasets.iter().enumerate() {
        write_file(&args.out.join(format!("dataset_{k}.jsonl")), dataset)?;
    }
    let ck = serde_json::to_string_pretty(&Checkpoint::of(&run.policy)).expect("serializes");
    write_file(&args.out.join("checkpoint.json"), &(ck + "\n"))?;
    write_file(&args.out.join("warnings.txt"), &(run.warnings.join("\n") + "\n"))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// trpo_full | online_filter | offline_filter.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub iters: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "max-steps")]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub k_history: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eps_clip: Option<f64>,
    #[arg(long)]
    pub eps_adv: Option<f64>,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let mode =
        parse_train_mode(args.mode.as_deref().or(file.mode.as_deref()).unwrap_or("trpo_full"))?;
    let seed = resolve_seed(args.seed, file)?;
    let mut cfg = TrainConfig::for_mode(mode, seed);
    cfg.group_size = pick(args.group_size, file.group_size, cfg.group_size);
    cfg.iterations = args.iters.unwrap_or(cfg.iterations);
    cfg.t_max = pick(args.max_steps, file.t_max, cfg.t_max);
    cfg.k_history = pick(args.k_history, file.k_history, cfg.k_history);
    cfg.lr = pick(args.lr, file.lr, cfg.lr);
    cfg.eps_clip = pick(args.eps_clip, file.eps_clip, cfg.eps_clip);
    cfg.eps_adv = pick(args.eps_adv, file.eps_adv, cfg.eps_adv);
    if cfg.group_size < 2 {
        return Err(usage("group size must be at least 2 for group-relative training"));
    }
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = read_pool(&args.pool)?;
    let _lock = DirLock::acquire(&args.out)?;
    let result = train(&world, &pool, &cfg);
    write_file(&args.out.join("metrics.csv"), &render_metrics_csv(&result.metrics))?;
    let ck = serde_json::to_string_pretty(&Checkpoint::of(&result.policy)).expect("serializes");
    write_file(&args.out.join("checkpoint.json"), &(ck + "\n"))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub k_history: Option<usize>,
    /// Emit the history-window x step-budget sweep (learned backend only).
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub apps_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    tasks: usize,
    success_rate: f64,
    mean_steps: f64,
    per_difficulty: BTreeMap<u32, DifficultyRow>,
}

#[derive(Debug, Serialize)]
struct DifficultyRow {
    tasks: usize,
    success_rate: f64,
}

fn eval_episode(
    world: &Arc<World>,
    task: &TaskQuery,
    backend: &BackendSpec,
    policy: &PolicyParams,
    t_max: u32,
    k_history: usize,
    seed: u64,
) -> Result<JudgedTrajectory, CliError> {
    let mut env = Env::new(world.clone());
    let traj = match backend {
        BackendSpec::Learned => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut driver = LearnedDriver { policy, rng: &mut rng };
            run_episode_e2e(task, &mut env, &mut driver, k_history, t_max, "eval")
        }
        other => {
            let mut backends = role_backends(other, task, world, seed)?;
            let cfg = EpisodeConfig { t_max, ..Default::default() };
            run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, "eval")
        }
    };
    let verdict = judge_trajectory(world, task, &traj);
    Ok(JudgedTrajectory { traj, verdict })
}

pub fn cmd_eval(args: &EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let backend: BackendSpec = args
        .backend
        .as_deref()
        .or(file.backend.as_deref())
        .unwrap_or("oracle")
        .parse()
        .map_err(usage)?;
    let seed = resolve_seed(args.seed, file)?;
    let t_max = pick(args.t_max, file.t_max, 15);
    let k_history = pick(args.k_history, file.k_history, 3);
    if args.sweep && backend != BackendSpec::Learned {
        return Err(usage("--sweep requires --backend learned"));
    }
    let world = load_world(args.apps_dir.as_deref().or(file.apps_dir.as_deref()))?;
    let pool = read_pool(&args.pool)?;
    let policy = load_policy(args.checkpoint.as_deref())?;
    let _lock = DirLock::acquire(&args.out)?;

    let mut successes = 0usize;
    let mut total_steps = 0usize;
    let mut per_diff: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for task in &pool {
        let ep_seed = fnv1a64(&format!("{seed}:{}", task.task_id));
        let judged = eval_episode(&world, task, &backend, &policy, t_max, k_history, ep_seed)?;
        let entry = per_diff.entry(task.difficulty).or_default();
        entry.0 += 1;
        if judged.correct() {
            successes += 1;
            entry.1 += 1;
        }
        total_steps += judged.traj.steps.len();
    }
    let report = EvalReport {
        tasks: pool.len(),
        success_rate: successes as f64 / pool.len() as f64,
        mean_steps: total_steps as f64 / pool.len() as f64,
        per_difficulty: per_diff
            .into_iter()
            .map(|(d, (n, s))| {
                (d, DifficultyRow { tasks: n, success_rate: s as f64 / n as f64 })
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&args.out.join("report.json"), &json)?;
    let mut csv = String::from("difficulty,tasks,success_rate\n");
    for (d, row) in &report.per_difficulty {
        csv.push_str(&format!("{d},{},{:.6}\n", row.tasks, row.success_rate));
    }
    write_file(&args.out.join("report.csv"), &csv)?;

    if args.sweep {
        let mut sweep = String::from("k_history,budget,success_rate\n");
        for k in 1..=3usize {
            for budget in [5u32, 10, 15] {
                let mut wins = 0usize;
                for task in &pool {
                    // Same per-(task, k) seed across budgets so a bigger
                    // budget replays the identical action stream, longer.
                    let ep_seed = fnv1a64(&format!("{seed}:{}:{k}", task.task_id));
                    let judged = eval_episode(
                        &world,
                        task,
                        &BackendSpec::Learned,
                        &policy,
                        budget,
                        k,
                        ep_seed,
                    )?;
                    if judged.correct() {
                        wins += 1;
                    }
                }
                sweep.push_str(&format!(
                    "{k},{budget},{:.6}\n",
                    wins as f64 / pool.len() as f64
                ));
            }
        }
        write_file(&args.out.join("sweep.csv"), &sweep)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSV files from train runs.
    #[arg(long, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
struct MetricsRow {
    seed: u64,
    iteration: u32,
    mode: String,
    success_rate: f64,
    mean_reward: f64,
    dropped_groups: u32,
    replay_injections: u32,
    grad_norm: f64,
}

fn schema_error(path: &Path, msg: &str) -> CliError {
    CliError::Runtime(anyhow!("schema error in {}: {msg}", path.display()))
}

fn parse_metrics_file(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| schema_error(path, "empty file"))?;
    let seeded_header = format!("seed,{METRICS_HEADER}");
    let seeded = if header == METRICS_HEADER {
        false
    } else if header == seeded_header {
        true
    } else {
        return Err(schema_error(path, "unexpected header"));
    };
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if seeded { 8 } else { 7 };
        if fields.len() != expected {
            return Err(schema_error(path, &format!("row {} has {} columns", ln + 2, fields.len())));
        }
        let bad = |what: &str| schema_error(path, &format!("row {}: bad {what}", ln + 2));
        let mut it = fields.into_iter();
        let seed: u64 =
            if seeded { it.next().unwrap().parse().map_err(|_| bad("seed"))? } else { 0 };
        rows.push(MetricsRow {
            seed,
            iteration: it.next().unwrap().parse().map_err(|_| bad("iteration"))?,
            mode: it.next().unwrap().to_string(),
            success_rate: it.next().unwrap().parse().map_err(|_| bad("success_rate"))?,
            mean_reward: it.next().unwrap().parse().map_err(|_| bad("mean_reward"))?,
            dropped_groups: it.next().unwrap().parse().map_err(|_| bad("dropped_groups"))?,
            replay_injections: it
                .next()
                .unwrap()
                .parse()
                .map_err(|_| bad("replay_injections"))?,
            grad_norm: it.next().unwrap().parse().map_err(|_| bad("grad_norm"))?,
        });
    }
    Ok(rows)
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    if args.inputs.is_empty() {
        return Err(CliError::Runtime(anyhow!("schema error: no input metrics files")));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut seen: Vec<(String, u64, u32)> = Vec::new();
    for path in &args.inputs {
        for row in parse_metrics_file(path)? {
            let key = (row.mode.clone(), row.seed, row.iteration);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| {
        (&a.mode, a.seed, a.iteration).cmp(&(&b.mode, b.seed, b.iteration))
    });
    let _lock = DirLock::acquire(&args.out)?;

    let mut merged = format!("seed,{METRICS_HEADER}\n");
    for r in &rows {
        merged.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{},{:.6}\n",
            r.seed,
            r.iteration,
            r.mode,
            r.success_rate,
            r.mean_reward,
            r.dropped_groups,
            r.replay_injections,
            r.grad_norm
        ));
    }
    write_file(&args.out.join("merged.csv"), &merged)?;

    // Learning-curve series: per (mode, iteration) mean success over seeds.
    let mut series_map: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let entry = series_map.entry((r.mode.clone(), r.iteration)).or_insert((0.0, 0));
        entry.0 += r.success_rate;
        entry.1 += 1;
    }
    let mut series = String::from("mode,iteration,mean_success_rate\n");
    for ((mode, iteration), (sum, n)) in &series_map {
        series.push_str(&format!("{mode},{iteration},{:.6}\n", sum / *n as f64));
    }
    write_file(&args.out.join("series.csv"), &series)?;

    // Final-performance table: per mode, mean success at each seed's last
    // recorded iteration.
    let mut final_map: BTreeMap<String, BTreeMap<u64, (u32, f64)>> = BTreeMap::new();
    for r in &rows {
        let per_seed = final_map.entry(r.mode.clone()).or_default();
        let entry = per_seed.entry(r.seed).or_insert((r.iteration, r.success_rate));
        if r.iteration >= entry.0 {
            *entry = (r.iteration, r.success_rate);
        }
    }
    let final_table: BTreeMap<String, serde_json::Value> = final_map
        .into_iter()
        .map(|(mode, per_seed)| {
            let n = per_seed.len();
            let mean: f64 =
                per_seed.values().map(|(_, s)| s).sum::<f64>() / n as f64;
            (mode, serde_json::json!({ "seeds": n, "mean_final_success_rate": mean }))
        })
        .collect();
    let mut json =
        serde_json::to_string_pretty(&final_table).expect("final table serializes");
    json.push('\n');
    write_file(&args.out.join("final.json"), &json)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenQueries(args) => cmd_gen_queries(args, &file),
        Command::Rollout(args) => cmd_rollout(args, &file),
        Command::Judge(args) => cmd_judge(args, &file),
        Command::Pipeline { command: PipelineCommand::Run(args) } => {
            cmd_pipeline_run(args, &file)
        }
        Command::Train(args) => cmd_train(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Report(args) => cmd_report(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn backend_spec_grammar() {
        assert_eq!("oracle".parse::<BackendSpec>().unwrap(), BackendSpec::Oracle);
        assert_eq!("noisy:0.3".parse::<BackendSpec>().unwrap(), BackendSpec::Noisy(0.3));
        assert_eq!(
            "remote:http://localhost:1".parse::<BackendSpec>().unwrap(),
            BackendSpec::Remote("http://localhost:1".into())
        );
        assert!("noisy:2.0".parse::<BackendSpec>().is_err());
        assert!("bogus".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn config_precedence_flag_over_file_over_default() {
        let file = FileConfig { t_max: Some(9), ..Default::default() };
        assert_eq!(pick(Some(4u32), file.t_max, 15), 4);
        assert_eq!(pick(None, file.t_max, 15), 9);
        assert_eq!(pick::<u32>(None, None, 15), 15);
    }

    #[test]
    fn seed_resolution_prefers_flag_then_file() {
        let file = FileConfig { seed: Some(7), ..Default::default() };
        assert_eq!(resolve_seed(Some(3), &file).unwrap(), 3);
        assert_eq!(resolve_seed(None, &file).unwrap(), 7);
    }

    #[test]
    fn dir_lock_is_exclusive_and_released_on_drop() {
        let dir = tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn report_rejects_bad_schema_and_dedupes_rows() {
        let dir = tempdir().unwrap();
        let good = dir.path().join("a.csv");
        fs::write(
            &good,
            format!("{METRICS_HEADER}\n0,trpo_full,0.5,0.5,1,0,0.1\n1,trpo_full,0.6,0.6,0,0,0.1\n"),
        )
        .unwrap();
        let dup = dir.path().join("b.csv");
        fs::write(&dup, format!("{METRICS_HEADER}\n1,trpo_full,0.9,0.9,0,0,0.2\n")).unwrap();
        let out = dir.path().join("out");
        cmd_report(&ReportArgs { inputs: vec![good.clone(), dup], out: out.clone() }).unwrap();
        let merged = fs::read_to_string(out.join("merged.csv")).unwrap();
        // Duplicate (mode, seed, iteration) keeps the first occurrence.
        assert_eq!(merged.lines().count(), 3);
        assert!(merged.contains("1,trpo_full,0.600000"));
        assert!(!merged.contains("0.900000"));

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "nope,nope\n1,2\n").unwrap();
        let err = cmd_report(&ReportArgs {
            inputs: vec![bad],
            out: dir.path().join("out2"),
        })
        .unwrap_err();
        assert!(err.to_string().contains("schema"));
        assert!(cmd_report(&ReportArgs { inputs: vec![], out: dir.path().join("out3") })
            .unwrap_err()
            .to_string()
            .contains("schema"));
    }
}
