//! Self-evolving trajectory production: parallel rollout batches, reasoning
//! synthesis by rejection sampling, role distillation, the filtering and
//! balancing passes, and the iterative loop that feeds the trainer.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{intent_phrase, run_episode, run_episode_e2e, EpisodeConfig, KnowledgeTable, LearnedDriver, RoleBackends};
use crate::gui_sim::{Action, Env, Observation, ScrollDirection, TerminateStatus, World};
use crate::judgment::{judge_trajectory, score_of, JudgedTrajectory, TAU_C};
use crate::taskgen::{extract_action_intent, TaskQuery};
use crate::trajectory::{Judgment, StepRecord, Trajectory};
use crate::trpo::policy::{fnv1a64, PolicyContext, PolicyParams};
use crate::trpo::train_on_dataset;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("step {0} carries no role records")]
    MissingRoleRecord(u32),
    #[error("reflector balancing: the {0} class is empty")]
    EmptyClass(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    E2E,
    Role,
    Both,
}

/// One judged rollout batch with its per-task group layout.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub iteration: u32,
    pub trajectories: Vec<JudgedTrajectory>,
    pub groups: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Serialized decision context of one step: everything the policy saw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleContext {
    pub instruction: String,
    pub history: Vec<String>,
    pub observation: Observation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSample {
    pub context: String,
    pub reasoning: String,
    pub target_action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: String,
    pub attempts: u32,
    pub successes: u32,
}

impl TaskStats {
    pub fn p_succ(&self) -> f64 {
        assert!(self.attempts >= 1);
        self.successes as f64 / self.attempts as f64
    }
}

fn step_context(instruction: &str, steps: &[StepRecord], t: usize) -> String {
    let history: Vec<String> = steps[..t]
        .iter()
        .map(|s| s.conclusion.clone().unwrap_or_else(|| s.action.summary.clone()))
        .collect();
    let ctx = SampleContext {
        instruction: instruction.to_string(),
        history,
        observation: steps[t].obs_before.clone(),
    };
    serde_json::to_string(&ctx).expect("context serializes")
}

/// Rebuilds the policy-facing triplet from a serialized sample, for handing
/// filtered datasets to the trainer.
pub fn sample_to_triplet(
    sample: &TrainingSample,
    app_names: &[String],
) -> Option<(PolicyContext, Action, f64)> {
    let ctx: SampleContext = serde_json::from_str(&sample.context).ok()?;
    Some((
        PolicyContext {
            instruction: ctx.instruction,
            observation: ctx.observation,
            history_len: ctx.history.len(),
            app_names: app_names.to_vec(),
        },
        sample.target_action.clone(),
        sample.weight,
    ))
}

/// G end-to-end episodes per task under `policy`, judged on return.
/// Deterministic per (seed, task, group index); worker failures surface as
/// Failed trajectories, never abort the batch.
pub fn rollout_e2e(
    world: &Arc<World>,
    tasks: &[TaskQuery],
    policy: &PolicyParams,
    group_size: usize,
    k_history: usize,
    t_max: u32,
    seed: u64,
    iteration: u32,
) -> RolloutBatch {
    assert!(group_size >= 1);
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|ti| (0..group_size).map(move |gi| (ti, gi)))
        .collect();
    let trajectories: Vec<JudgedTrajectory> = jobs
        .par_iter()
        .map(|(ti, gi)| {
            let task = &tasks[*ti];
            let ep_seed = fnv1a64(&format!("{seed}:{iteration}:{}:{gi}", task.task_id));
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
            let mut driver = LearnedDriver { policy, rng: &mut rng };
            let mut env = Env::new(world.clone());
            let traj_id = format!("{}#{iteration}:{gi}", task.task_id);
            let traj = run_episode_e2e(task, &mut env, &mut driver, k_history, t_max, &traj_id);
            let verdict = judge_trajectory(world, task, &traj);
            JudgedTrajectory { traj, verdict }
        })
        .collect();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, (ti, _)) in jobs.iter().enumerate() {
        groups.entry(tasks[*ti].task_id.clone()).or_default().push(idx);
    }
    RolloutBatch { iteration, trajectories, groups }
}

/// G orchestrated episodes per task with per-step role records. The backend
/// factory receives (task, group index, episode seed).
pub fn rollout_role<F>(
    world: &Arc<World>,
    tasks: &[TaskQuery],
    factory: F,
    group_size: usize,
    t_max: u32,
    seed: u64,
    iteration: u32,
) -> RolloutBatch
where
    F: Fn(&TaskQuery, usize, u64) -> RoleBackends + Sync,
{
    assert!(group_size >= 1);
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|ti| (0..group_size).map(move |gi| (ti, gi)))
        .collect();
    let trajectories: Vec<JudgedTrajectory> = jobs
        .par_iter()
        .map(|(ti, gi)| {
            let task = &tasks[*ti];
            let ep_seed = fnv1a64(&format!("{seed}:{iteration}:{}:{gi}:role", task.task_id));
            let mut backends = factory(task, *gi, ep_seed);
            let mut env = Env::new(world.clone());
            let cfg = EpisodeConfig { t_max, record_roles: true, ..Default::default() };
            let traj_id = format!("{}#{iteration}:{gi}:role", task.task_id);
            let traj = run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, &traj_id);
            let verdict = judge_trajectory(world, task, &traj);
            JudgedTrajectory { traj, verdict }
        })
        .collect();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, (ti, _)) in jobs.iter().enumerate() {
        groups.entry(tasks[*ti].task_id.clone()).or_default().push(idx);
    }
    RolloutBatch { iteration, trajectories, groups }
}

/// Append-only JSONL store of judged trajectories; records are never
/// rewritten, re-judging appends a fresh record.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRecord {
    traj: Trajectory,
    verdict: crate::judgment::TrajectoryVerdict,
}

impl TrajectoryStore {
    pub fn new(path: PathBuf) -> Self {
        TrajectoryStore { path }
    }

    pub fn append(&self, judged: &JudgedTrajectory) -> Result<(), PipelineError> {
        let record =
            StoreRecord { traj: judged.traj.clone(), verdict: judged.verdict.clone() };
        let mut file =
            std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        Ok(())
    }

    pub fn len(&self) -> Result<usize, PipelineError> {
        match std::fs::read_to_string(&self.path) {
            Ok(text) => Ok(text.lines().count()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(e.into()),
        }
    }

    pub fn is_empty(&self) -> Result<bool, PipelineError> {
        Ok(self.len()? == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HintStyle {
    /// Direct imperative framing of the decision.
    Imperative,
    /// Progress-narration framing.
    Narrative,
}

pub const HINT_STYLES: [HintStyle; 2] = [HintStyle::Imperative, HintStyle::Narrative];

pub fn render_hint(style: HintStyle, instruction: &str, truth: Option<&Action>) -> String {
    let mut hint = match style {
        HintStyle::Imperative => format!("decide the next action for: {instruction}"),
        HintStyle::Narrative => {
            format!("given the progress so far, narrate the next move toward: {instruction}")
        }
    };
    if let Some(action) = truth {
        hint.push_str(&format!(". the correct action is: {}", intent_phrase(action)));
    }
    hint
}

/// Produces reasoning text for one step from a hint and the step context.
pub trait ReasoningGenerator {
    fn generate(&self, hint: &str, step: &StepRecord, attempt: u32) -> String;
}

/// Predicts an action from reasoning text alone (context withheld).
pub trait ActionPredictor {
    fn predict(&self, reasoning: &str, obs: &Observation) -> Option<Action>;
}

/// Ground-truth-aware generator: states the step's actual intent.
pub struct OracleGenerator;

impl ReasoningGenerator for OracleGenerator {
    fn generate(&self, hint: &str, step: &StepRecord, _attempt: u32) -> String {
        format!("{hint}. {}", intent_phrase(&step.action.action))
    }
}

/// Hint echo: conditions only on the hint, never peeks at the step.
pub struct EchoGenerator;

impl ReasoningGenerator for EchoGenerator {
    fn generate(&self, hint: &str, _step: &StepRecord, _attempt: u32) -> String {
        hint.to_string()
    }
}

/// Reconstructs a concrete action from declared intent text.
pub fn parse_action_from_reasoning(reasoning: &str) -> Option<Action> {
    let intent = extract_action_intent(reasoning)?;
    match intent.variant {
        "Click" => Some(Action::Click { widget_id: intent.target_widget? }),
        "Type" => {
            Some(Action::Type { widget_id: intent.target_widget?, text: intent.value? })
        }
        "Scroll" => {
            let direction = if reasoning.to_lowercase().contains("scroll up") {
                ScrollDirection::Up
            } else {
                ScrollDirection::Down
            };
            Some(Action::Scroll { direction })
        }
        "Back" => Some(Action::Back),
        "OpenApp" => {
            let lower = reasoning.to_lowercase();
            let pos = lower.find("open app ")?;
            let tail = &reasoning[pos + "open app ".len()..];
            let name: String = tail
                .chars()
                .take_while(|c| c.is_alphanumeric() || *c == '_')
                .collect();
            if name.is_empty() {
                None
            } else {
                Some(Action::OpenApp { app_name: name })
            }
        }
        "Wait" => Some(Action::Wait),
        "Terminate" => Some(Action::Terminate { status: TerminateStatus::Success }),
        _ => None,
    }
}

/// Faithful predictor over the intent grammar.
pub struct OraclePredictor;

impl ActionPredictor for OraclePredictor {
    fn predict(&self, reasoning: &str, _obs: &Observation) -> Option<Action> {
        parse_action_from_reasoning(reasoning)
    }
}

/// Adversarial predictor: turns every Click prediction into a Scroll.
pub struct FlippingPredictor;

impl ActionPredictor for FlippingPredictor {
    fn predict(&self, reasoning: &str, obs: &Observation) -> Option<Action> {
        match OraclePredictor.predict(reasoning, obs)? {
            Action::Click { .. } => Some(Action::Scroll { direction: ScrollDirection::Down }),
            other => Some(other),
        }
    }
}

pub const DEFAULT_MAX_TRIES: u32 = 4;

#[derive(Debug, Clone, Copy, Default)]
pub struct HintSamplingReport {
    pub accepted: u32,
    pub fallback_accepted: u32,
    pub rejected_steps: u32,
}

/// Per step and per hint style: generate reasoning, let the predictor
/// reconstruct the action, accept on exact match. After `max_tries` failed
/// attempts the ground truth is injected into the hint for one final
/// generation, accepted on action-type agreement alone.
pub fn hint_guided_rejection_sampling(
    task: &TaskQuery,
    judged: &JudgedTrajectory,
    hint_styles: &[HintStyle],
    generator: &dyn ReasoningGenerator,
    predictor: &dyn ActionPredictor,
    max_tries: u32,
) -> (Vec<TrainingSample>, HintSamplingReport) {
    let mut report = HintSamplingReport::default();
    if !judged.correct() {
        return (Vec::new(), report);
    }
    let steps = &judged.traj.steps;
    let mut out = Vec::new();
    for (t, step) in steps.iter().enumerate() {
        for style in hint_styles {
            let truth = &step.action.action;
            let mut accepted = None;
            for attempt in 0..max_tries {
                let hint = render_hint(*style, &task.instruction, None);
                let reasoning = generator.generate(&hint, step, attempt);
                if predictor.predict(&reasoning, &step.obs_before).as_ref() == Some(truth) {
                    accepted = Some(reasoning);
                    report.accepted += 1;
                    break;
                }
            }
            if accepted.is_none() {
                let hint = render_hint(*style, &task.instruction, Some(truth));
                let reasoning = generator.generate(&hint, step, max_tries);
                let type_match = extract_action_intent(&reasoning)
                    .map(|i| i.variant == truth.variant_name())
                    .unwrap_or(false);
                if type_match {
                    accepted = Some(reasoning);
                    report.fallback_accepted += 1;
                }
            }
            match accepted {
                Some(reasoning) => out.push(TrainingSample {
                    context: step_context(&task.instruction, steps, t),
                    reasoning,
                    target_action: truth.clone(),
                    role: None,
                    weight: 1.0,
                    polarity: None,
                }),
                None => report.rejected_steps += 1,
            }
        }
    }
    (out, report)
}

/// Merges each step's manager subgoal, worker thought, and prior reflection
/// into one unified reasoning text paired with the executed action. Refuses
/// trajectories not judged Correct (empty result).
pub fn distill_roles(
    task: &TaskQuery,
    judged: &JudgedTrajectory,
) -> Result<Vec<TrainingSample>, PipelineError> {
    if !judged.correct() {
        return Ok(Vec::new());
    }
    let steps = &judged.traj.steps;
    let mut out = Vec::with_capacity(steps.len());
    for (t, step) in steps.iter().enumerate() {
        if step.role_records.is_none() {
            return Err(PipelineError::MissingRoleRecord(step.t));
        }
        let subgoal = crate::agents::parse_summary(&step.action.summary)
            .map(|(g, _)| g)
            .unwrap_or_else(|| "-".to_string());
        let mut reasoning = format!(
            "current subgoal: {subgoal}. thought: {}",
            step.action.thought
        );
        if t > 0 {
            if let Some(prev) = steps[t - 1].reflection.as_ref() {
                reasoning.push_str(&format!(". prior reflection: {}", prev.feedback));
            }
        }
        out.push(TrainingSample {
            context: step_context(&task.instruction, steps, t),
            reasoning,
            target_action: step.action.action.clone(),
            role: Some("distilled".to_string()),
            weight: 1.0,
            polarity: None,
        });
    }
    Ok(out)
}

/// True iff the reasoning's declared intent matches the target action's
/// variant, and any named widget matches the action's target.
pub fn thought_action_consistent(sample: &TrainingSample) -> bool {
    let intent = match extract_action_intent(&sample.reasoning) {
        Some(i) => i,
        None => return false,
    };
    if intent.variant != sample.target_action.variant_name() {
        return false;
    }
    match (&intent.target_widget, sample.target_action.target_widget()) {
        (Some(declared), Some(actual)) => declared == actual,
        (Some(_), None) => false,
        (None, _) => true,
    }
}

/// Exactly the subset with score >= tau_c, order preserved.
pub fn critic_filter(
    samples: Vec<TrainingSample>,
    step_scores: &[f64],
    tau_c: f64,
) -> Vec<TrainingSample> {
    assert_eq!(samples.len(), step_scores.len());
    samples
        .into_iter()
        .zip(step_scores)
        .filter(|(_, score)| **score >= tau_c)
        .map(|(s, _)| s)
        .collect()
}

/// w(task) proportional to (1 - p_succ + delta), normalized to mean 1.
pub fn reweight_tasks(stats: &[TaskStats], delta: f64) -> BTreeMap<String, f64> {
    assert!(delta > 0.0);
    if stats.is_empty() {
        return BTreeMap::new();
    }
    let raw: Vec<f64> = stats.iter().map(|s| 1.0 - s.p_succ() + delta).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    stats
        .iter()
        .zip(raw)
        .map(|(s, w)| (s.task_id.clone(), w / mean))
        .collect()
}

/// Reflector sample balancing: negatives are steps i with j_i = FAILURE
/// followed by j_{i+1} = SUCCESS; positives are all steps of all-SUCCESS
/// trajectories. The larger class is uniformly subsampled (seeded) down to
/// the smaller one.
pub fn balance_reflector(
    tasks: &BTreeMap<String, &TaskQuery>,
    trajectories: &[JudgedTrajectory],
    seed: u64,
) -> Result<Vec<TrainingSample>, PipelineError> {
    let mut negatives = Vec::new();
    let mut positives = Vec::new();
    for judged in trajectories {
        let steps = &judged.traj.steps;
        let instruction = tasks
            .get(&judged.traj.task_id)
            .map(|t| t.instruction.as_str())
            .unwrap_or("");
        let judgments: Vec<Option<Judgment>> =
            steps.iter().map(|s| s.reflection.as_ref().map(|r| r.judgment)).collect();
        let all_success = !steps.is_empty()
            && judgments.iter().all(|j| *j == Some(Judgment::Success));
        for (i, step) in steps.iter().enumerate() {
            let sample = |polarity| TrainingSample {
                context: step_context(instruction, steps, i),
                reasoning: step
                    .reflection
                    .as_ref()
                    .map(|r| r.feedback.clone())
                    .unwrap_or_default(),
                target_action: step.action.action.clone(),
                role: Some("reflector".to_string()),
                weight: 1.0,
                polarity: Some(polarity),
            };
            if all_success {
                positives.push(sample(Polarity::Positive));
            } else if judgments[i] == Some(Judgment::Failure)
                && judgments.get(i + 1).copied().flatten() == Some(Judgment::Success)
            {
                negatives.push(sample(Polarity::Negative));
            }
        }
    }
    if positives.is_empty() {
        return Err(PipelineError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(PipelineError::EmptyClass("negative"));
    }
    let target = positives.len().min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsample = |class: Vec<TrainingSample>| {
        if class.len() == target {
            return class;
        }
        let mut indices: Vec<usize> = (0..class.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(target);
        indices.sort_unstable();
        let mut picked = Vec::with_capacity(target);
        let mut iter = indices.into_iter().peekable();
        for (i, s) in class.into_iter().enumerate() {
            if iter.peek() == Some(&i) {
                iter.next();
                picked.push(s);
            }
        }
        picked
    };
    let positives = subsample(positives);
    let negatives = subsample(negatives);
    let mut out = positives;
    out.extend(negatives);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsRow {
    pub iteration: u32,
    pub task_id: String,
    pub attempts: u32,
    pub successes: u32,
    pub p_succ: f64,
    pub weight: f64,
}

pub const STATS_HEADER: &str = "iteration,task_id,attempts,successes,p_succ,weight";

pub fn render_stats_csv(rows: &[StatsRow]) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.iteration, r.task_id, r.attempts, r.successes, r.p_succ, r.weight
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: RolloutMode,
    pub group_size: usize,
    pub iterations: u32,
    pub seed: u64,
    pub t_max: u32,
    pub k_history: usize,
    pub tau_c: f64,
    pub delta: f64,
    pub lr: f64,
    pub max_tries: u32,
    /// Worker corruption rate for odd-indexed role-mode group members; even
    /// members run the clean oracle so both reflector classes appear.
    pub role_noise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: RolloutMode::Both,
            group_size: 4,
            iterations: 2,
            seed: 0,
            t_max: 15,
            k_history: 3,
            tau_c: TAU_C,
            delta: 0.1,
            lr: 0.5,
            max_tries: DEFAULT_MAX_TRIES,
            role_noise: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub dataset_jsonl: String,
    pub dataset_size: usize,
    pub stats_rows: Vec<StatsRow>,
    pub warnings: Vec<String>,
    pub hint_report: HintSamplingReport,
}

/// One k -> k+1 pipeline step: rollout, judge, synthesize, filter, reweight,
/// balance, then hand the dataset to the trainer (policy updated in place).
pub fn iterate(
    world: &Arc<World>,
    pool: &[TaskQuery],
    policy: &mut PolicyParams,
    cfg: &PipelineConfig,
    iteration: u32,
    store: Option<&TrajectoryStore>,
) -> Result<IterationOutput, PipelineError> {
    let mut warnings = Vec::new();
    let by_id: BTreeMap<String, &TaskQuery> =
        pool.iter().map(|t| (t.task_id.clone(), t)).collect();

    let e2e = match cfg.mode {
        RolloutMode::Role => None,
        _ => Some(rollout_e2e(
            world,
            pool,
            policy,
            cfg.group_size,
            cfg.k_history,
            cfg.t_max,
            cfg.seed,
            iteration,
        )),
    };
    let role = match cfg.mode {
        RolloutMode::E2E => None,
        _ => Some(rollout_role(
            world,
            pool,
            |task, gi, seed| {
                if gi % 2 == 0 {
                    RoleBackends::oracle(task, world.clone())
                } else {
                    RoleBackends::noisy_worker(task, world.clone(), cfg.role_noise, seed)
                }
            },
            cfg.group_size,
            cfg.t_max,
            cfg.seed,
            iteration,
        )),
    };
    if let Some(store) = store {
        for batch in e2e.iter().chain(role.iter()) {
            for judged in &batch.trajectories {
                store.append(judged)?;
            }
        }
    }

    // Success statistics and task weights come from the batch driving the
    // training signal (e2e when present, else role).
    let stats_batch = e2e.as_ref().or(role.as_ref()).expect("at least one mode");
    let mut stats: Vec<TaskStats> = Vec::new();
    for task in pool {
        let indices = &stats_batch.groups[&task.task_id];
        let successes =
            indices.iter().filter(|i| stats_batch.trajectories[**i].correct()).count();
        stats.push(TaskStats {
            task_id: task.task_id.clone(),
            attempts: indices.len() as u32,
            successes: successes as u32,
        });
    }
    let weights = reweight_tasks(&stats, cfg.delta);
    let stats_rows: Vec<StatsRow> = stats
        .iter()
        .map(|s| StatsRow {
            iteration,
            task_id: s.task_id.clone(),
            attempts: s.attempts,
            successes: s.successes,
            p_succ: s.p_succ(),
            weight: weights[&s.task_id],
        })
        .collect();

    // Reasoning synthesis from Correct trajectories, with per-sample step
    // scores for the critic filter.
    let mut scored: Vec<(TrainingSample, f64)> = Vec::new();
    let mut hint_report = HintSamplingReport::default();
    if let Some(batch) = &e2e {
        for judged in &batch.trajectories {
            if !judged.correct() {
                continue;
            }
            let task = by_id[&judged.traj.task_id];
            let (samples, report) = hint_guided_rejection_sampling(
                task,
                judged,
                &HINT_STYLES,
                &OracleGenerator,
                &OraclePredictor,
                cfg.max_tries,
            );
            hint_report.accepted += report.accepted;
            hint_report.fallback_accepted += report.fallback_accepted;
            hint_report.rejected_steps += report.rejected_steps;
            for sample in samples {
                // One sample per (step, style): style index = position % styles.
                let t = scored_step_index(&sample);
                let score = score_of(judged.verdict.step_labels[t]);
                scored.push((sample, score));
            }
        }
    }
    if let Some(batch) = &role {
        for judged in &batch.trajectories {
            if !judged.correct() {
                continue;
            }
            let task = by_id[&judged.traj.task_id];
            for sample in distill_roles(task, judged)? {
                let t = scored_step_index(&sample);
                let score = score_of(judged.verdict.step_labels[t]);
                scored.push((sample, score));
            }
        }
    }

    // Consistency gate, then critic filter, then task weights.
    let scored: Vec<(TrainingSample, f64)> =
        scored.into_iter().filter(|(s, _)| thought_action_consistent(s)).collect();
    let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let samples: Vec<TrainingSample> = scored.into_iter().map(|(s, _)| s).collect();
    let mut dataset = critic_filter(samples, &scores, cfg.tau_c);
    for sample in &mut dataset {
        if let Some(task_id) = task_id_of_context(&sample.context, &by_id) {
            if let Some(w) = weights.get(&task_id) {
                sample.weight = *w;
            }
        }
    }

    // Reflector balancing over the role batch; an empty class is reported,
    // not fatal.
    if let Some(batch) = &role {
        match balance_reflector(&by_id, &batch.trajectories, cfg.seed ^ iteration as u64) {
            Ok(mut reflector_samples) => dataset.append(&mut reflector_samples),
            Err(e @ PipelineError::EmptyClass(_)) => warnings.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }

    if dataset.is_empty() {
        warnings.push("no correct trajectories; policy unchanged".to_string());
    } else {
        let app_names = world.app_names();
        let triplets: Vec<(PolicyContext, Action, f64)> = dataset
            .iter()
            .filter(|s| s.role.as_deref() != Some("reflector"))
            .filter_map(|s| sample_to_triplet(s, &app_names))
            .collect();
        if !triplets.is_empty() {
            train_on_dataset(policy, &triplets, cfg.lr);
        }
    }

    let mut dataset_jsonl = String::new();
    for sample in &dataset {
        dataset_jsonl.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        dataset_jsonl.push('\n');
    }
    Ok(IterationOutput {
        dataset_size: dataset.len(),
        dataset_jsonl,
        stats_rows,
        warnings,
        hint_report,
    })
}

fn scored_step_index(sample: &TrainingSample) -> usize {
    serde_json::from_str::<SampleContext>(&sample.context)
        .map(|c| c.history.len())
        .unwrap_or(0)
}

fn task_id_of_context(
    context: &str,
    by_id: &BTreeMap<String, &TaskQuery>,
) -> Option<String> {
    let ctx: SampleContext = serde_json::from_str(context).ok()?;
    by_id
        .iter()
        .find(|(_, t)| t.instruction == ctx.instruction)
        .map(|(id, _)| id.clone())
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub policy: PolicyParams,
    pub stats_csv: String,
    pub datasets: Vec<String>,
    pub warnings: Vec<String>,
}

/// Runs `cfg.iterations` pipeline steps from a fresh policy.
pub fn run_pipeline(
    world: &Arc<World>,
    pool: &[TaskQuery],
    cfg: &PipelineConfig,
    store: Option<&TrajectoryStore>,
) -> Result<PipelineRun, PipelineError> {
    let mut policy = PolicyParams::new(2048, 1.0);
    let mut rows = Vec::new();
    let mut datasets = Vec::new();
    let mut warnings = Vec::new();
    for k in 0..cfg.iterations {
        let out = iterate(world, pool, &mut policy, cfg, k, store)?;
        rows.extend(out.stats_rows);
        datasets.push(out.dataset_jsonl);
        warnings.extend(out.warnings);
    }
    Ok(PipelineRun { policy, stats_csv: render_stats_csv(&rows), datasets, warnings })
}
