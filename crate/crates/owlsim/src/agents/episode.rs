//! The orchestration loop (manager/worker/reflector/notetaker phase order)
//! and the single-policy end-to-end loop with conclusion-based history
//! compression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gui_sim::{Action, Env, Goal, Observation, TerminateStatus};
use crate::gui_sim::goal_satisfied;
use crate::taskgen::TaskQuery;
use crate::trajectory::{
    ActionRecord, Judgment, Outcome, PhaseTag, PolicyStepMeta, ReflectionFeedback, RoleCall,
    RoleRecords, StepRecord, TrajMode, Trajectory,
};

use super::backend::{
    intent_phrase, render_summary, BackendError, ManagerUpdate, RoleBackends, WorkerDecision,
    N_INSPECT,
};
use crate::trpo::policy::{PolicyContext, PolicyParams};
use rand_chacha::ChaCha8Rng;

/// Local stand-in for the retrieval pipeline: ordered key-phrase table.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeTable {
    pub entries: Vec<(String, String)>,
}

/// Concatenates snippets whose key phrases occur in the instruction
/// (case-insensitive), in table order.
pub fn retrieve_knowledge(instruction: &str, table: &KnowledgeTable) -> String {
    let lower = instruction.to_lowercase();
    table
        .entries
        .iter()
        .filter(|(key, _)| lower.contains(&key.to_lowercase()))
        .map(|(_, snippet)| snippet.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub t_max: u32,
    pub n_inspect: usize,
    /// Record per-step role request/response pairs (Role-mode trajectories).
    pub record_roles: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { t_max: 15, n_inspect: N_INSPECT, record_roles: false }
    }
}

/// Consecutive all-infeasible worker turns before the loop declares a
/// stalemate and terminates with failure.
const STALEMATE_LIMIT: u32 = 3;

fn role_call<Req: Serialize, Resp: Serialize>(request: &Req, response: &Resp) -> RoleCall {
    RoleCall {
        request: serde_json::to_string(request).unwrap_or_default(),
        response: serde_json::to_string(response).unwrap_or_default(),
    }
}

fn failed(task: &TaskQuery, traj_id: &str, env: &Env, steps: Vec<StepRecord>, error: String) -> Trajectory {
    Trajectory {
        task_id: task.task_id.clone(),
        traj_id: traj_id.to_string(),
        mode: TrajMode::Role,
        steps,
        outcome: Outcome::Failed,
        error: Some(error),
        final_state: env.snapshot(),
    }
}

/// Runs one orchestrated episode. Phase order per step is strictly
/// Worker, Execute, Reflector, [Notetaker on SUCCESS], Manager; the loop,
/// not the backends, enforces subgoal-set disjointness, note monotonicity,
/// and termination within t_max.
pub fn run_episode(
    task: &TaskQuery,
    env: &mut Env,
    backends: &mut RoleBackends,
    knowledge: &KnowledgeTable,
    cfg: &EpisodeConfig,
    traj_id: &str,
) -> Trajectory {
    let k_rag = retrieve_knowledge(&task.instruction, knowledge);
    let s0 = match env.reset(&task.app_names) {
        Ok(obs) => obs,
        Err(e) => return failed(task, traj_id, env, Vec::new(), e.to_string()),
    };

    // Manager initialization, one retry on backend error.
    let init = backends
        .manager
        .manager_init(&task.instruction, &s0, &k_rag)
        .or_else(|_| backends.manager.manager_init(&task.instruction, &s0, &k_rag));
    let mut pending = match init {
        Ok(ss) => ss,
        Err(e) => return failed(task, traj_id, env, Vec::new(), e.to_string()),
    };
    let init_call = role_call(&(&task.instruction, &s0.serialized, &k_rag), &pending);
    let mut completed: Vec<String> = Vec::new();
    let mut notes: BTreeMap<String, String> = BTreeMap::new();
    let mut last_feedback: Option<ReflectionFeedback> = None;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut stalemate = 0u32;
    let mut obs = s0;

    if pending.is_empty() {
        return Trajectory {
            task_id: task.task_id.clone(),
            traj_id: traj_id.to_string(),
            mode: TrajMode::Role,
            steps,
            outcome: Outcome::Succeeded,
            error: None,
            final_state: env.snapshot(),
        };
    }

    let mut outcome = Outcome::Failed;
    let mut error = Some("timeout".to_string());

    for t in 0..cfg.t_max {
        // Worker phase.
        let decision = match backends.worker.worker_act(
            &task.instruction,
            &obs,
            &pending[..pending.len().min(cfg.n_inspect)],
            last_feedback.as_ref(),
            &notes,
        ) {
            Ok(d) => d,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        let mut malformed = false;
        let record = match decision {
            WorkerDecision::Act(rec) => {
                stalemate = 0;
                rec
            }
            WorkerDecision::Malformed { raw } => {
                malformed = true;
                ActionRecord {
                    thought: raw,
                    action: Action::Wait,
                    summary: render_summary(
                        pending.first().map(String::as_str).unwrap_or("-"),
                        "malformed",
                        &Action::Wait,
                    ),
                }
            }
            WorkerDecision::Infeasible => {
                stalemate += 1;
                if stalemate >= STALEMATE_LIMIT {
                    let action = Action::Terminate { status: TerminateStatus::Failure };
                    ActionRecord {
                        thought: format!("execution stalemate; {}", intent_phrase(&action)),
                        summary: render_summary("-", "stalemate", &action),
                        action,
                    }
                } else {
                    let action = Action::Wait;
                    ActionRecord {
                        thought: format!("no pending subgoal is executable; {}", intent_phrase(&action)),
                        summary: render_summary("-", "infeasible", &action),
                        action,
                    }
                }
            }
        };
        let worker_call = role_call(&(&obs.serialized, &pending), &record.summary);

        // Execute phase.
        let state_before = env.snapshot();
        let obs_before = obs.clone();
        let (obs_after, mut report) = match env.step(&record.action) {
            Ok(r) => r,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        report.malformed = malformed;
        let state_after = env.snapshot();

        // Reflector phase; a malformed emission is always judged FAILURE.
        let mut reflection = match backends.reflector.reflect(
            &task.instruction,
            &obs_before,
            &obs_after,
            &record,
        ) {
            Ok(f) => f,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        if malformed {
            reflection = ReflectionFeedback {
                judgment: Judgment::Failure,
                feedback: "the worker emission could not be parsed".to_string(),
            };
        }
        let reflector_call = role_call(&(&obs_before.serialized, &obs_after.serialized), &reflection);

        // Notetaker phase, gated on SUCCESS; merge is last-writer-wins and
        // keys are never removed.
        let mut notes_delta = BTreeMap::new();
        let mut notetaker_call = None;
        if reflection.judgment == Judgment::Success {
            match backends.notetaker.take_notes(&obs_after) {
                Ok(fresh) => {
                    for (k, v) in fresh {
                        if notes.get(&k) != Some(&v) {
                            notes.insert(k.clone(), v.clone());
                            notes_delta.insert(k, v);
                        }
                    }
                    notetaker_call = Some(role_call(&obs_after.serialized, &notes_delta));
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }

        // Manager phase, one retry on backend error; the loop sanitizes the
        // returned plan so SS and CS stay disjoint and CS only grows.
        let update = backends
            .manager
            .manager_update(&task.instruction, &obs_after, &record, &reflection, &pending, &completed)
            .or_else(|_| {
                backends.manager.manager_update(
                    &task.instruction,
                    &obs_after,
                    &record,
                    &reflection,
                    &pending,
                    &completed,
                )
            });
        let ManagerUpdate { pending: new_pending, completed: new_completed } = match update {
            Ok(u) => u,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        for g in new_completed {
            if !completed.contains(&g) {
                completed.push(g);
            }
        }
        pending = new_pending.into_iter().filter(|g| !completed.contains(g)).collect();
        let manager_call = if t == 0 {
            init_call.clone()
        } else {
            role_call(&(&record.summary, &reflection), &(&pending, &completed))
        };

        let mut phase_tags = vec![PhaseTag::Worker, PhaseTag::Execute, PhaseTag::Reflector];
        if reflection.judgment == Judgment::Success {
            phase_tags.push(PhaseTag::Notetaker);
        }
        phase_tags.push(PhaseTag::Manager);

        let role_records = cfg.record_roles.then(|| RoleRecords {
            manager: manager_call,
            worker: worker_call,
            reflector: reflector_call,
            notetaker: notetaker_call,
        });
        let terminated = matches!(record.action, Action::Terminate { .. });
        let terminate_status = match record.action {
            Action::Terminate { status } => Some(status),
            _ => None,
        };
        steps.push(StepRecord {
            t,
            obs_before,
            action: record,
            obs_after: obs_after.clone(),
            transition: report,
            reflection: Some(reflection),
            notes_delta,
            subgoals_pending: pending.clone(),
            subgoals_completed: completed.clone(),
            phase_tags,
            conclusion: None,
            state_before,
            state_after,
            role_records,
            policy_meta: None,
        });
        obs = obs_after;

        if terminated {
            outcome = if pending.is_empty() && terminate_status == Some(TerminateStatus::Success) {
                Outcome::Succeeded
            } else {
                Outcome::Failed
            };
            error = if outcome == Outcome::Succeeded { None } else { Some("terminated".into()) };
            break;
        }
        if pending.is_empty() {
            outcome = Outcome::Succeeded;
            error = None;
            break;
        }
        last_feedback = steps.last().and_then(|s| s.reflection.clone());
    }

    Trajectory {
        task_id: task.task_id.clone(),
        traj_id: traj_id.to_string(),
        mode: TrajMode::Role,
        steps,
        outcome,
        error,
        final_state: env.snapshot(),
    }
}

/// One end-to-end policy emission.
#[derive(Debug, Clone)]
pub enum PolicyEmission {
    Act { thought: String, action: Action, conclusion: Option<String>, log_prob: Option<f64> },
    Malformed { raw: String },
}

pub trait PolicyDriver {
    fn decide(
        &mut self,
        instruction: &str,
        history: &[HistoryEntry],
        obs: &Observation,
        app_names: &[String],
    ) -> Result<PolicyEmission, BackendError>;
}

/// History entry for the end-to-end mode; observations are retained only for
/// the most recent k entries, conclusions persist for the whole episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub conclusion: String,
    pub action: Action,
    pub observation: Option<String>,
}

/// Drops observations from all but the most recent k entries; conclusions
/// are kept for every entry.
pub fn compress_history(history: &mut [HistoryEntry], k: usize) {
    let len = history.len();
    for (i, entry) in history.iter_mut().enumerate() {
        if i + k < len {
            entry.observation = None;
        }
    }
}

/// Toy-policy driver sampling from the linear-softmax policy.
pub struct LearnedDriver<'a> {
    pub policy: &'a PolicyParams,
    pub rng: &'a mut ChaCha8Rng,
}

impl PolicyDriver for LearnedDriver<'_> {
    fn decide(
        &mut self,
        instruction: &str,
        history: &[HistoryEntry],
        obs: &Observation,
        app_names: &[String],
    ) -> Result<PolicyEmission, BackendError> {
        let ctx = PolicyContext {
            instruction: instruction.to_string(),
            observation: obs.clone(),
            history_len: history.len(),
            app_names: app_names.to_vec(),
        };
        let (action, log_prob) = self.policy.sample(&ctx, self.rng);
        Ok(PolicyEmission::Act {
            thought: intent_phrase(&action),
            action,
            conclusion: None,
            log_prob: Some(log_prob),
        })
    }
}

/// Runs one end-to-end episode: a_t ~ pi(.|S_t, H_t), with only conclusions
/// kept in the history beyond the most recent k_history observations.
pub fn run_episode_e2e(
    task: &TaskQuery,
    env: &mut Env,
    driver: &mut dyn PolicyDriver,
    k_history: usize,
    t_max: u32,
    traj_id: &str,
) -> Trajectory {
    assert!((1..=3).contains(&k_history), "k_history must be in 1..=3");
    let app_names = env.world().app_names();
    let obs0 = match env.reset(&task.app_names) {
        Ok(o) => o,
        Err(e) => {
            let mut t = failed(task, traj_id, env, Vec::new(), e.to_string());
            t.mode = TrajMode::E2E;
            return t;
        }
    };
    let mut obs = obs0;
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut outcome = Outcome::Failed;
    let mut error = Some("timeout".to_string());

    for t in 0..t_max {
        let emission = match driver.decide(&task.instruction, &history, &obs, &app_names) {
            Ok(e) => e,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        let history_len = history.len();
        let (thought, action, given_conclusion, log_prob, malformed) = match emission {
            PolicyEmission::Act { thought, action, conclusion, log_prob } => {
                (thought, action, conclusion, log_prob, false)
            }
            PolicyEmission::Malformed { raw } => (raw, Action::Wait, None, None, true),
        };

        let state_before = env.snapshot();
        let obs_before = obs.clone();
        let (obs_after, mut report) = match env.step(&action) {
            Ok(r) => r,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        report.malformed = malformed;
        let state_after = env.snapshot();
        let conclusion = given_conclusion
            .unwrap_or_else(|| format!("step {t}: {} -> {}", action, report.description));

        history.push(HistoryEntry {
            conclusion: conclusion.clone(),
            action: action.clone(),
            observation: Some(obs_after.serialized.clone()),
        });
        compress_history(&mut history, k_history);

        let terminated = matches!(action, Action::Terminate { .. });
        let terminate_status = match action {
            Action::Terminate { status } => Some(status),
            _ => None,
        };
        steps.push(StepRecord {
            t,
            obs_before,
            action: ActionRecord {
                thought,
                summary: format!("e2e | {}", intent_phrase(&action)),
                action,
            },
            obs_after: obs_after.clone(),
            transition: report,
            reflection: None,
            notes_delta: BTreeMap::new(),
            subgoals_pending: Vec::new(),
            subgoals_completed: Vec::new(),
            phase_tags: vec![PhaseTag::Worker, PhaseTag::Execute],
            conclusion: Some(conclusion),
            state_before,
            state_after,
            role_records: None,
            policy_meta: log_prob.map(|lp| PolicyStepMeta { chosen_log_prob: lp, history_len }),
        });
        obs = obs_after;

        if terminated {
            let goal_met = goal_met(env, &task.goal);
            outcome = if terminate_status == Some(TerminateStatus::Success) && goal_met {
                Outcome::Succeeded
            } else {
                Outcome::Failed
            };
            error = if outcome == Outcome::Succeeded { None } else { Some("terminated".into()) };
            break;
        }
    }

    Trajectory {
        task_id: task.task_id.clone(),
        traj_id: traj_id.to_string(),
        mode: TrajMode::E2E,
        steps,
        outcome,
        error,
        final_state: env.snapshot(),
    }
}

fn goal_met(env: &Env, goal: &Goal) -> bool {
    goal_satisfied(&env.snapshot(), goal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::taskgen::generate_pool;
    use crate::trajectory::Judgment;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn knowledge_lookup_matches_case_insensitively_in_table_order() {
        let table = KnowledgeTable {
            entries: vec![
                ("weather".into(), "check the forecast first".into()),
                ("takeoutapp".into(), "the menu hides widgets below the fold".into()),
            ],
        };
        assert_eq!(retrieve_knowledge("Open TakeoutApp now", &table), "the menu hides widgets below the fold");
        assert_eq!(retrieve_knowledge("nothing relevant", &table), "");
        let both = retrieve_knowledge("weather in TakeoutApp", &table);
        assert_eq!(both, "check the forecast first\nthe menu hides widgets below the fold");
    }

    #[test]
    fn oracle_episode_succeeds_with_one_step_per_oracle_action() {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 10, 11, 4).unwrap();
        for task in &pool {
            let mut env = Env::new(world.clone());
            let mut backends = RoleBackends::oracle(task, world.clone());
            let cfg = EpisodeConfig { t_max: 15, ..Default::default() };
            let traj = run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, "r0");
            assert_eq!(traj.outcome, Outcome::Succeeded, "task {} failed: {:?}", task.task_id, traj.error);
            assert_eq!(traj.steps.len(), task.oracle_actions.len(), "task {}", task.task_id);
        }
    }

    #[test]
    fn zero_budget_times_out_with_no_steps() {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 1, 5, 4).unwrap();
        let task = &pool[0];
        let mut env = Env::new(world.clone());
        let mut backends = RoleBackends::oracle(task, world.clone());
        let cfg = EpisodeConfig { t_max: 0, ..Default::default() };
        let traj = run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, "r0");
        assert_eq!(traj.outcome, Outcome::Failed);
        assert!(traj.steps.is_empty());
    }

    #[test]
    fn notes_change_only_on_success_steps() {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 5, 23, 4).unwrap();
        for task in &pool {
            let mut env = Env::new(world.clone());
            let mut backends = RoleBackends::noisy_worker(task, world.clone(), 0.4, 99);
            let cfg = EpisodeConfig::default();
            let traj = run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, "r0");
            for step in &traj.steps {
                if !step.notes_delta.is_empty() {
                    assert_eq!(
                        step.reflection.as_ref().unwrap().judgment,
                        Judgment::Success
                    );
                }
            }
        }
    }

    #[test]
    fn history_compression_keeps_exactly_k_observations() {
        let mut history: Vec<HistoryEntry> = (0..5)
            .map(|i| HistoryEntry {
                conclusion: format!("c{i}"),
                action: Action::Wait,
                observation: Some(format!("o{i}")),
            })
            .collect();
        compress_history(&mut history, 3);
        let kept: Vec<bool> = history.iter().map(|h| h.observation.is_some()).collect();
        assert_eq!(kept, vec![false, false, true, true, true]);
        assert!(history.iter().all(|h| !h.conclusion.is_empty()));
    }

    #[test]
    fn e2e_history_keeps_k_observations_and_all_conclusions() {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 1, 5, 4).unwrap();
        let task = &pool[0];
        let policy = PolicyParams::new(128, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut driver = LearnedDriver { policy: &policy, rng: &mut rng };
        let mut env = Env::new(world.clone());
        let traj = run_episode_e2e(task, &mut env, &mut driver, 3, 15, "e0");
        assert!(traj.steps.len() <= 15);
        for step in &traj.steps {
            assert!(step.conclusion.is_some());
        }
    }
}
