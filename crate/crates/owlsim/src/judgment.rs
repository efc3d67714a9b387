//! Trajectory correctness judgment: rule-based step-level critic, the
//! dual-channel trajectory verdict joined by conjunction, and query-specific
//! guidance synthesis from judged-correct reference trajectories.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gui_sim::{goal_satisfied, Action, EnvSnapshot, TerminateStatus, World};
use crate::taskgen::TaskQuery;
use crate::trajectory::{Judgment, StepRecord, Trajectory};

#[derive(Debug, Error)]
pub enum JudgmentError {
    #[error("every step was filtered out; no guidance material")]
    EmptyGuidance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepLabel {
    Good,
    Neutral,
    Harmful,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCriticOutput {
    pub analysis: String,
    pub summary: String,
    pub label: StepLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelVerdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub text_channel: ChannelVerdict,
    pub multimodal_channel: ChannelVerdict,
    pub consensus: ChannelVerdict,
    pub step_labels: Vec<StepLabel>,
}

/// One verdict line of the external JSONL format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub task_id: String,
    pub traj_id: String,
    pub text_channel: ChannelVerdict,
    pub multimodal_channel: ChannelVerdict,
    pub consensus: ChannelVerdict,
    pub step_labels: Vec<StepLabel>,
}

/// A trajectory paired with its dual-channel verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgedTrajectory {
    pub traj: Trajectory,
    pub verdict: TrajectoryVerdict,
}

impl JudgedTrajectory {
    pub fn correct(&self) -> bool {
        self.verdict.consensus == ChannelVerdict::Correct
    }
}

/// Default acceptance threshold on critic scores; keeps only GOOD steps.
pub const TAU_C: f64 = 0.75;

pub fn critic_score(output: &StepCriticOutput) -> f64 {
    match output.label {
        StepLabel::Good => 1.0,
        StepLabel::Neutral => 0.5,
        StepLabel::Harmful => 0.0,
    }
}

pub fn score_of(label: StepLabel) -> f64 {
    match label {
        StepLabel::Good => 1.0,
        StepLabel::Neutral => 0.5,
        StepLabel::Harmful => 0.0,
    }
}

/// Scalar progress estimate for a state: unsatisfied constraints dominate,
/// then forward navigation distance to the next needed screen.
fn remaining_cost(world: &World, task: &TaskQuery, state: &EnvSnapshot) -> u32 {
    const PER_CONSTRAINT: u32 = 100;
    const WRONG_APP: u32 = 40;
    const CLOSED_APP: u32 = 35;
    const UNREACHABLE: u32 = 30;
    let goal = &task.goal;
    let unsatisfied: Vec<&String> = goal
        .slot_constraints
        .iter()
        .filter(|(slot, v)| state.slot_values.get(*slot) != Some(v))
        .map(|(slot, _)| slot)
        .collect();
    let mut cost = PER_CONSTRAINT * unsatisfied.len() as u32;
    let screen_pending = goal
        .goal_screen
        .as_ref()
        .map(|s| state.current_screen != *s)
        .unwrap_or(false);
    if screen_pending {
        cost += PER_CONSTRAINT / 2;
    }
    let app = task.primary_app();
    match &state.current_app {
        None => cost + CLOSED_APP,
        Some(a) if a != app => cost + WRONG_APP,
        Some(_) => {
            let graph = match world.app(app) {
                Some(g) => g,
                None => return cost + WRONG_APP,
            };
            let mut targets: Vec<String> = unsatisfied
                .iter()
                .filter_map(|slot| world.screen_for_slot(app, slot).map(|s| s.screen_id.clone()))
                .collect();
            if targets.is_empty() {
                if let Some(gs) = &goal.goal_screen {
                    targets.push(gs.clone());
                }
            }
            let nav = targets
                .iter()
                .map(|t| graph.nav_distance(&state.current_screen, t).unwrap_or(UNREACHABLE))
                .min()
                .unwrap_or(0);
            cost + nav
        }
    }
}

fn targets_reachable(world: &World, task: &TaskQuery, state: &EnvSnapshot) -> bool {
    let app = task.primary_app();
    if state.current_app.as_deref() != Some(app) {
        // The app can always be (re)opened; nothing is ruled out yet.
        return true;
    }
    let graph = match world.app(app) {
        Some(g) => g,
        None => return false,
    };
    let goal = &task.goal;
    let mut targets: Vec<String> = goal
        .slot_constraints
        .iter()
        .filter(|(slot, v)| state.slot_values.get(*slot) != Some(v))
        .filter_map(|(slot, _)| world.screen_for_slot(app, slot).map(|s| s.screen_id.clone()))
        .collect();
    if targets.is_empty() {
        if let Some(gs) = &goal.goal_screen {
            targets.push(gs.clone());
        }
    }
    targets
        .iter()
        .all(|t| graph.nav_distance(&state.current_screen, t).is_some())
}

fn clip_summary(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().take(30).collect();
    words.join(" ")
}

/// Rule-based step critic: GOOD when the step strictly reduces the remaining
/// cost toward the goal, HARMFUL when it destroys progress (overwrites a
/// correct slot, abandons in-app reachability, or terminates prematurely),
/// NEUTRAL otherwise.
pub fn step_critic(
    world: &Arc<World>,
    task: &TaskQuery,
    action: &Action,
    before: &EnvSnapshot,
    after: &EnvSnapshot,
) -> StepCriticOutput {
    let goal = &task.goal;
    let make = |label: StepLabel, analysis: String| StepCriticOutput {
        summary: clip_summary(&analysis),
        analysis,
        label,
    };

    if let Action::Terminate { status } = action {
        let done = *status == TerminateStatus::Success && goal_satisfied(after, goal);
        return if done {
            make(StepLabel::Good, format!("terminating with the goal satisfied completes '{}'", task.task_id))
        } else {
            make(StepLabel::Harmful, "terminating before the goal is satisfied abandons the task".into())
        };
    }

    if before == after {
        return make(StepLabel::Neutral, format!("action {action} changed nothing"));
    }

    // Slot writes: compare against goal constraints.
    for (slot, after_value) in &after.slot_values {
        let before_value = before.slot_values.get(slot);
        if before_value == Some(after_value) {
            continue;
        }
        if let Some(wanted) = goal.slot_constraints.get(slot) {
            if after_value == wanted {
                return make(StepLabel::Good, format!("set {slot} to the required value '{wanted}'"));
            }
            if before_value == Some(wanted) {
                return make(
                    StepLabel::Harmful,
                    format!("overwrote the correct value of {slot} with '{after_value}'"),
                );
            }
            return make(
                StepLabel::Neutral,
                format!("wrote '{after_value}' into {slot}, which the goal wants as '{wanted}'"),
            );
        }
        return make(StepLabel::Neutral, format!("changed {slot}, which the goal ignores"));
    }

    let cost_before = remaining_cost(world, task, before);
    let cost_after = remaining_cost(world, task, after);
    if cost_after < cost_before {
        return make(StepLabel::Good, format!("moved closer to the goal ({cost_before} -> {cost_after})"));
    }
    if targets_reachable(world, task, before) && !targets_reachable(world, task, after) {
        return make(
            StepLabel::Harmful,
            format!("left every forward path to the goal from {}", after.current_screen),
        );
    }
    make(StepLabel::Neutral, format!("action {action} neither advanced nor damaged the task"))
}

pub fn step_labels(world: &Arc<World>, task: &TaskQuery, traj: &Trajectory) -> Vec<StepLabel> {
    traj.steps
        .iter()
        .map(|s| step_critic(world, task, &s.action.action, &s.state_before, &s.state_after).label)
        .collect()
}

fn ended_with_success(traj: &Trajectory) -> bool {
    matches!(
        traj.steps.last().map(|s| &s.action.action),
        Some(Action::Terminate { status: TerminateStatus::Success })
    )
}

/// Textual channel: reconstructs the outcome purely from per-step effect
/// descriptions and summaries, never reading ground-truth state.
pub fn text_channel_verdict(task: &TaskQuery, traj: &Trajectory) -> ChannelVerdict {
    let mut slots: BTreeMap<String, String> = BTreeMap::new();
    let mut screen = String::new();
    let mut terminated_ok = false;
    for step in &traj.steps {
        let d = &step.transition.description;
        if let Some(rest) = d.strip_prefix("entered '") {
            if let Some((value, tail)) = rest.split_once("' into ") {
                if let Some((slot, _)) = tail.split_once(" field on ") {
                    slots.insert(slot.to_string(), value.to_string());
                }
            }
        } else if let Some(rest) = d.strip_prefix("toggled ") {
            if let Some((slot, tail)) = rest.split_once(" to ") {
                if let Some((value, _)) = tail.split_once(" on ") {
                    slots.insert(slot.to_string(), value.to_string());
                }
            }
        } else if let Some(rest) = d.strip_prefix("navigated from ") {
            if let Some((_, to)) = rest.split_once(" to ") {
                screen = to.to_string();
            }
        } else if let Some(rest) = d.strip_prefix("navigated back from ") {
            if let Some((_, to)) = rest.split_once(" to ") {
                screen = to.to_string();
            }
        } else if let Some(rest) = d.strip_prefix("opened app ") {
            if let Some((_, home)) = rest.split_once(" showing ") {
                screen = home.to_string();
            }
        } else if d == "terminated the episode with status success" {
            terminated_ok = true;
        }
    }
    let slots_ok = task
        .goal
        .slot_constraints
        .iter()
        .all(|(slot, v)| slots.get(slot) == Some(v));
    let screen_ok = task
        .goal
        .goal_screen
        .as_ref()
        .map(|gs| screen == *gs)
        .unwrap_or(true);
    if terminated_ok && slots_ok && screen_ok {
        ChannelVerdict::Correct
    } else {
        ChannelVerdict::Incorrect
    }
}

/// Multimodal channel: additionally reads the ground-truth final snapshot
/// and the step-critic labels.
pub fn multimodal_channel_verdict(
    _world: &Arc<World>,
    task: &TaskQuery,
    traj: &Trajectory,
    labels: &[StepLabel],
) -> ChannelVerdict {
    let goal_ok = goal_satisfied(&traj.final_state, &task.goal);
    // A HARMFUL final step has nothing after it that could recover.
    let unrecovered_harm = labels.last() == Some(&StepLabel::Harmful);
    if goal_ok && ended_with_success(traj) && !unrecovered_harm {
        ChannelVerdict::Correct
    } else {
        ChannelVerdict::Incorrect
    }
}

pub fn consensus(text: ChannelVerdict, multimodal: ChannelVerdict) -> ChannelVerdict {
    if text == ChannelVerdict::Correct && multimodal == ChannelVerdict::Correct {
        ChannelVerdict::Correct
    } else {
        ChannelVerdict::Incorrect
    }
}

/// Dual-channel trajectory judgment joined by conjunction.
pub fn judge_trajectory(world: &Arc<World>, task: &TaskQuery, traj: &Trajectory) -> TrajectoryVerdict {
    let labels = step_labels(world, task, traj);
    let text = text_channel_verdict(task, traj);
    let multimodal = multimodal_channel_verdict(world, task, traj, &labels);
    TrajectoryVerdict {
        text_channel: text,
        multimodal_channel: multimodal,
        consensus: consensus(text, multimodal),
        step_labels: labels,
    }
}

/// Filters a reference trajectory down to its effective steps and renders a
/// numbered guidance list from their effect descriptions.
pub fn generate_guidance(traj: &Trajectory, _task: &TaskQuery) -> Result<String, JudgmentError> {
    let keep = |step: &StepRecord| -> bool {
        if let Some(r) = &step.reflection {
            if r.judgment == Judgment::Failure {
                return false;
            }
        }
        // The worker declared progress but the screen did not move.
        let declared_progress = !step.action.summary.contains("status: infeasible")
            && !step.action.summary.contains("status: malformed");
        let expects_change = !matches!(step.action.action, Action::Wait | Action::Terminate { .. });
        if declared_progress && expects_change && !step.transition.state_changed {
            return false;
        }
        step.transition.state_changed || matches!(step.action.action, Action::Terminate { .. })
    };
    let lines: Vec<String> = traj
        .steps
        .iter()
        .filter(|s| keep(s))
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.transition.description))
        .collect();
    if lines.is_empty() {
        return Err(JudgmentError::EmptyGuidance);
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{run_episode, EpisodeConfig, KnowledgeTable, RoleBackends};
    use crate::fixtures;
    use crate::gui_sim::Env;
    use crate::taskgen::generate_pool;
    use crate::trajectory::Outcome;

    fn oracle_traj(seed: u64) -> (TaskQuery, Trajectory, Arc<World>) {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 1, seed, 4).unwrap();
        let task = pool.into_iter().next().unwrap();
        let mut env = Env::new(world.clone());
        let mut backends = RoleBackends::oracle(&task, world.clone());
        let traj = run_episode(
            &task,
            &mut env,
            &mut backends,
            &KnowledgeTable::default(),
            &EpisodeConfig::default(),
            "r0",
        );
        (task, traj, world)
    }

    #[test]
    fn oracle_trajectory_is_judged_correct_on_both_channels() {
        for seed in [1u64, 2, 3, 9, 14] {
            let (task, traj, world) = oracle_traj(seed);
            assert_eq!(traj.outcome, Outcome::Succeeded);
            let verdict = judge_trajectory(&world, &task, &traj);
            assert_eq!(verdict.text_channel, ChannelVerdict::Correct, "seed {seed}");
            assert_eq!(verdict.multimodal_channel, ChannelVerdict::Correct, "seed {seed}");
            assert_eq!(verdict.consensus, ChannelVerdict::Correct);
        }
    }

    #[test]
    fn truncated_trajectory_is_judged_incorrect() {
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 20, 8, 4).unwrap();
        let task = pool.into_iter().find(|t| t.difficulty >= 3).unwrap();
        let mut env = Env::new(world.clone());
        let mut backends = RoleBackends::oracle(&task, world.clone());
        let cfg = EpisodeConfig { t_max: 2, ..Default::default() };
        let traj = run_episode(&task, &mut env, &mut backends, &KnowledgeTable::default(), &cfg, "r0");
        let verdict = judge_trajectory(&world, &task, &traj);
        assert_eq!(verdict.consensus, ChannelVerdict::Incorrect);
    }

    #[test]
    fn consensus_is_exactly_conjunction() {
        use ChannelVerdict::*;
        assert_eq!(consensus(Correct, Correct), Correct);
        assert_eq!(consensus(Correct, Incorrect), Incorrect);
        assert_eq!(consensus(Incorrect, Correct), Incorrect);
        assert_eq!(consensus(Incorrect, Incorrect), Incorrect);
    }

    #[test]
    fn step_critic_labels_nav_wait_and_overwrite() {
        let (task, traj, world) = oracle_traj(1);
        let labels = step_labels(&world, &task, &traj);
        // Oracle steps are never harmful; non-scroll steps are good.
        assert!(!labels.contains(&StepLabel::Harmful));
        assert!(labels.contains(&StepLabel::Good));

        // Wait is neutral.
        let first = &traj.steps[0];
        let out = step_critic(&world, &task, &Action::Wait, &first.state_before, &first.state_before);
        assert_eq!(out.label, StepLabel::Neutral);
        assert!(out.summary.split_whitespace().count() <= 30);
    }

    #[test]
    fn overwriting_a_correct_goal_slot_is_harmful() {
        let world = fixtures::fixture_world();
        let graph = world.app("TakeoutApp").unwrap().clone();
        let path = crate::taskgen::SampledPath {
            app_name: "TakeoutApp".into(),
            screens: vec!["home".into(), "menu".into()],
            descriptions: vec![String::new(); 2],
            slot_bindings: vec![("search".into(), "pizza".into())],
        };
        let task = crate::taskgen::task_from_path(
            &graph,
            &path,
            "t".into(),
            crate::taskgen::InstructionStyle::Explicit,
        );
        let mut env = Env::new(world.clone());
        env.reset(&[]).unwrap();
        env.step(&Action::OpenApp { app_name: "TakeoutApp".into() }).unwrap();
        env.step(&Action::Click { widget_id: "to_menu".into() }).unwrap();
        env.step(&Action::Type { widget_id: "search_box".into(), text: "pizza".into() }).unwrap();
        let before = env.snapshot();
        let action = Action::Type { widget_id: "search_box".into(), text: "burger".into() };
        env.step(&action).unwrap();
        let out = step_critic(&world, &task, &action, &before, &env.snapshot());
        assert_eq!(out.label, StepLabel::Harmful);

        // Premature terminate is harmful too.
        let before = env.snapshot();
        let term = Action::Terminate { status: TerminateStatus::Success };
        let out = step_critic(&world, &task, &term, &before, &before);
        assert_eq!(out.label, StepLabel::Harmful);
    }

    #[test]
    fn critic_score_mapping_and_threshold() {
        let mk = |label| StepCriticOutput { analysis: String::new(), summary: String::new(), label };
        assert_eq!(critic_score(&mk(StepLabel::Good)), 1.0);
        assert_eq!(critic_score(&mk(StepLabel::Neutral)), 0.5);
        assert_eq!(critic_score(&mk(StepLabel::Harmful)), 0.0);
        assert!(critic_score(&mk(StepLabel::Good)) >= TAU_C);
        assert!(critic_score(&mk(StepLabel::Neutral)) < TAU_C);
    }

    #[test]
    fn guidance_lists_phases_and_drops_noop_steps() {
        let (task, traj, _) = oracle_traj(1);
        let guidance = generate_guidance(&traj, &task).unwrap();
        assert!(guidance.lines().count() >= 2);
        assert!(guidance.starts_with("1. opened app "));
        assert!(!guidance.contains("no state change"));

        // A trajectory with nothing but waits yields no guidance.
        let mut empty = traj.clone();
        empty.steps.clear();
        assert!(matches!(generate_guidance(&empty, &task), Err(JudgmentError::EmptyGuidance)));
    }
}
