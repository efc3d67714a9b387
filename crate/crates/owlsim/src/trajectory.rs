//! Shared trajectory record types: per-step action records, reflections,
//! phase tags, and the JSONL trace rendering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gui_sim::{Action, EnvSnapshot, Observation, TransitionReport};

/// Worker output for one step: thought, concrete action, intent summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionRecord {
    pub thought: String,
    pub action: Action,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Judgment {
    Success,
    Failure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectionFeedback {
    pub judgment: Judgment,
    pub feedback: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseTag {
    Worker,
    Execute,
    Reflector,
    Notetaker,
    Manager,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajMode {
    E2E,
    Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Succeeded,
    Failed,
}

/// One recorded role invocation (request and response, both rendered).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleCall {
    pub request: String,
    pub response: String,
}

/// Per-step role records present in Role-mode trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleRecords {
    pub manager: RoleCall,
    pub worker: RoleCall,
    pub reflector: RoleCall,
    pub notetaker: Option<RoleCall>,
}

/// Sampling metadata recorded when a learned policy chose the action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyStepMeta {
    pub chosen_log_prob: f64,
    pub history_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub obs_before: Observation,
    pub action: ActionRecord,
    pub obs_after: Observation,
    pub transition: TransitionReport,
    pub reflection: Option<ReflectionFeedback>,
    pub notes_delta: BTreeMap<String, String>,
    pub subgoals_pending: Vec<String>,
    pub subgoals_completed: Vec<String>,
    pub phase_tags: Vec<PhaseTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
    pub state_before: EnvSnapshot,
    pub state_after: EnvSnapshot,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role_records: Option<RoleRecords>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_meta: Option<PolicyStepMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub traj_id: String,
    pub mode: TrajMode,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub final_state: EnvSnapshot,
}

impl Trajectory {
    /// True iff any step's decoded output was flagged malformed.
    pub fn any_malformed(&self) -> bool {
        self.steps.iter().any(|s| s.transition.malformed)
    }

    pub fn count_malformed(&self) -> usize {
        self.steps.iter().filter(|s| s.transition.malformed).count()
    }
}

/// One trace line per step, with exactly the external trace fields.
pub fn trace_line(step: &StepRecord) -> serde_json::Value {
    serde_json::json!({
        "t": step.t,
        "obs_before": step.obs_before.serialized,
        "action": {
            "thought": step.action.thought,
            "action": step.action.action,
            "summary": step.action.summary,
        },
        "obs_after": step.obs_after.serialized,
        "transition": {
            "state_changed": step.transition.state_changed,
            "description": step.transition.description,
            "malformed": step.transition.malformed,
        },
        "reflection": step.reflection.as_ref().map(|r| serde_json::json!({
            "judgment": r.judgment,
            "feedback": r.feedback,
        })),
        "notes_delta": step.notes_delta,
        "subgoals_pending": step.subgoals_pending,
        "subgoals_completed": step.subgoals_completed,
    })
}

/// Renders a whole trajectory as JSONL trace text.
pub fn render_trace(traj: &Trajectory) -> String {
    let mut out = String::new();
    for step in &traj.steps {
        out.push_str(&trace_line(step).to_string());
        out.push('\n');
    }
    out
}
