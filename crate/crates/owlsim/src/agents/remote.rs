//! Remote agent backend speaking the HTTP role protocol. Any transport
//! failure or unparsable body is surfaced as a backend error, except for the
//! worker and policy roles where it degrades to a malformed emission.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::gui_sim::{Action, Observation};
use crate::trajectory::{ActionRecord, Judgment, ReflectionFeedback};

use super::backend::{AgentBackend, BackendError, ManagerUpdate, WorkerDecision};
use super::episode::{HistoryEntry, PolicyDriver, PolicyEmission};

pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteBackend { base_url: base_url.into(), agent: ureq::Agent::new_with_defaults() }
    }

    fn call(&self, body: Value) -> Result<Value, BackendError> {
        let url = format!("{}/v1/role", self.base_url.trim_end_matches('/'));
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| BackendError::Remote(e.to_string()))?;
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| BackendError::Remote(format!("unparsable body: {e}")))
    }

    fn state_value(
        pending: &[String],
        completed: &[String],
        notes: &BTreeMap<String, String>,
        last_feedback: Option<&ReflectionFeedback>,
    ) -> Value {
        json!({
            "pending_subgoals": pending,
            "completed_subgoals": completed,
            "notes": notes,
            "last_feedback": last_feedback,
        })
    }
}

fn string_list(v: Option<&Value>) -> Option<Vec<String>> {
    v?.as_array()?
        .iter()
        .map(|x| x.as_str().map(|s| s.to_string()))
        .collect()
}

impl AgentBackend for RemoteBackend {
    fn manager_init(
        &mut self,
        instruction: &str,
        s0: &Observation,
        k_rag: &str,
    ) -> Result<Vec<String>, BackendError> {
        let body = json!({
            "role": "manager_init",
            "instruction": instruction,
            "observation": s0.serialized,
            "history": [],
            "state": Self::state_value(&[], &[], &BTreeMap::new(), None),
            "k_rag": k_rag,
        });
        let v = self.call(body)?;
        string_list(v.get("subgoals"))
            .ok_or_else(|| BackendError::Remote("manager_init response lacks subgoals".into()))
    }

    fn manager_update(
        &mut self,
        instruction: &str,
        obs: &Observation,
        prev_action: &ActionRecord,
        feedback: &ReflectionFeedback,
        pending: &[String],
        completed: &[String],
    ) -> Result<ManagerUpdate, BackendError> {
        let body = json!({
            "role": "manager_update",
            "instruction": instruction,
            "observation": obs.serialized,
            "history": [{"summary": prev_action.summary, "feedback": feedback}],
            "state": Self::state_value(pending, completed, &BTreeMap::new(), Some(feedback)),
        });
        let v = self.call(body)?;
        let new_pending = string_list(v.get("subgoals"))
            .ok_or_else(|| BackendError::Remote("manager_update response lacks subgoals".into()))?;
        // Anything dropped from the pending list is reported as completed.
        let mut new_completed = completed.to_vec();
        for g in pending {
            if !new_pending.contains(g) {
                new_completed.push(g.clone());
            }
        }
        Ok(ManagerUpdate { pending: new_pending, completed: new_completed })
    }

    fn worker_act(
        &mut self,
        instruction: &str,
        obs: &Observation,
        pending: &[String],
        last_feedback: Option<&ReflectionFeedback>,
        notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError> {
        let body = json!({
            "role": "worker",
            "instruction": instruction,
            "observation": obs.serialized,
            "history": [],
            "state": Self::state_value(pending, &[], notes, last_feedback),
        });
        let v = match self.call(body) {
            Ok(v) => v,
            Err(e) => return Ok(WorkerDecision::Malformed { raw: e.to_string() }),
        };
        let action: Option<Action> =
            v.get("action").and_then(|a| serde_json::from_value(a.clone()).ok());
        match action {
            Some(action) => {
                let thought =
                    v.get("thought").and_then(Value::as_str).unwrap_or_default().to_string();
                let summary = v
                    .get("summary")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("subgoal: - | status: remote | {action}"));
                Ok(WorkerDecision::Act(ActionRecord { thought, action, summary }))
            }
            None => Ok(WorkerDecision::Malformed { raw: v.to_string() }),
        }
    }

    fn reflect(
        &mut self,
        instruction: &str,
        obs_before: &Observation,
        obs_after: &Observation,
        act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError> {
        let body = json!({
            "role": "reflector",
            "instruction": instruction,
            "observation": obs_after.serialized,
            "history": [{"summary": act.summary, "observation": obs_before.serialized}],
            "state": Self::state_value(&[], &[], &BTreeMap::new(), None),
        });
        let v = self.call(body)?;
        let judgment = match v.get("judgment").and_then(Value::as_str) {
            Some("SUCCESS") => Judgment::Success,
            Some("FAILURE") => Judgment::Failure,
            _ => return Err(BackendError::Remote("reflector response lacks judgment".into())),
        };
        let feedback = v.get("feedback").and_then(Value::as_str).unwrap_or_default().to_string();
        if judgment == Judgment::Failure && feedback.is_empty() {
            return Err(BackendError::Remote("FAILURE without diagnostic feedback".into()));
        }
        Ok(ReflectionFeedback { judgment, feedback })
    }

    fn take_notes(&mut self, obs: &Observation) -> Result<BTreeMap<String, String>, BackendError> {
        let body = json!({
            "role": "notetaker",
            "instruction": "",
            "observation": obs.serialized,
            "history": [],
            "state": Self::state_value(&[], &[], &BTreeMap::new(), None),
        });
        let v = self.call(body)?;
        match v.get("notes") {
            Some(notes) => serde_json::from_value(notes.clone())
                .map_err(|e| BackendError::Remote(format!("bad notes payload: {e}"))),
            None => Ok(BTreeMap::new()),
        }
    }
}

impl PolicyDriver for RemoteBackend {
    fn decide(
        &mut self,
        instruction: &str,
        history: &[HistoryEntry],
        obs: &Observation,
        _app_names: &[String],
    ) -> Result<PolicyEmission, BackendError> {
        let body = json!({
            "role": "policy",
            "instruction": instruction,
            "observation": obs.serialized,
            "history": history,
            "state": Self::state_value(&[], &[], &BTreeMap::new(), None),
        });
        let v = match self.call(body) {
            Ok(v) => v,
            Err(e) => return Ok(PolicyEmission::Malformed { raw: e.to_string() }),
        };
        let action: Option<Action> =
            v.get("action").and_then(|a| serde_json::from_value(a.clone()).ok());
        match action {
            Some(action) => Ok(PolicyEmission::Act {
                thought: v.get("thought").and_then(Value::as_str).unwrap_or_default().to_string(),
                action,
                conclusion: v.get("conclusion").and_then(Value::as_str).map(str::to_string),
                log_prob: None,
            }),
            None => Ok(PolicyEmission::Malformed { raw: v.to_string() }),
        }
    }
}
