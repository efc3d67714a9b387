//! Role backends for the orchestration loop: the shared trait plus the
//! oracle, noisy-oracle, and learned implementations. The oracle consults a
//! task's ground-truth action sequence, which is what makes every downstream
//! check exact at desk scale.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gui_sim::{
    Action, Observation, Screen, ScrollDirection, TerminateStatus, WidgetKind, World,
};
use crate::taskgen::{parse_goal_screen, parse_instruction_constraints, TaskQuery};
use crate::trajectory::{ActionRecord, Judgment, ReflectionFeedback};
use crate::trpo::policy::{enumerate_candidates, PolicyContext, PolicyParams};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("remote backend error: {0}")]
    Remote(String),
    #[error("backend does not implement role {0}")]
    Unsupported(&'static str),
}

/// Worker output: an action record, a declared infeasibility, or an
/// unparsable emission to be recorded as a malformed Wait.
#[derive(Debug, Clone)]
pub enum WorkerDecision {
    Act(ActionRecord),
    Infeasible,
    Malformed { raw: String },
}

/// Full replacement plan lists returned by the manager; the loop enforces
/// disjointness and monotone growth of the completed set.
#[derive(Debug, Clone)]
pub struct ManagerUpdate {
    pub pending: Vec<String>,
    pub completed: Vec<String>,
}

pub trait AgentBackend {
    fn manager_init(
        &mut self,
        instruction: &str,
        s0: &Observation,
        k_rag: &str,
    ) -> Result<Vec<String>, BackendError>;

    #[allow(clippy::too_many_arguments)]
    fn manager_update(
        &mut self,
        instruction: &str,
        obs: &Observation,
        prev_action: &ActionRecord,
        feedback: &ReflectionFeedback,
        pending: &[String],
        completed: &[String],
    ) -> Result<ManagerUpdate, BackendError>;

    fn worker_act(
        &mut self,
        instruction: &str,
        obs: &Observation,
        pending: &[String],
        last_feedback: Option<&ReflectionFeedback>,
        notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError>;

    fn reflect(
        &mut self,
        instruction: &str,
        obs_before: &Observation,
        obs_after: &Observation,
        act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError>;

    fn take_notes(&mut self, obs: &Observation) -> Result<BTreeMap<String, String>, BackendError>;
}

/// One backend per role, selectable independently.
pub struct RoleBackends {
    pub manager: Box<dyn AgentBackend>,
    pub worker: Box<dyn AgentBackend>,
    pub reflector: Box<dyn AgentBackend>,
    pub notetaker: Box<dyn AgentBackend>,
}

impl RoleBackends {
    pub fn oracle(task: &TaskQuery, world: Arc<World>) -> Self {
        let make = || Box::new(OracleBackend::new(task.clone(), world.clone()));
        RoleBackends { manager: make(), worker: make(), reflector: make(), notetaker: make() }
    }

    /// Oracle roles with a noisy worker (error rate rho).
    pub fn noisy_worker(task: &TaskQuery, world: Arc<World>, rho: f64, seed: u64) -> Self {
        let mut backends = Self::oracle(task, world.clone());
        backends.worker =
            Box::new(NoisyOracle::new(OracleBackend::new(task.clone(), world), rho, seed));
        backends
    }
}

/// Declared-intent phrase for an action; shared by every templated thought so
/// the thought/action consistency check can invert it.
pub fn intent_phrase(action: &Action) -> String {
    match action {
        Action::Click { widget_id } => format!("I click `{widget_id}`"),
        Action::Type { widget_id, text } => format!("I enter '{text}' into `{widget_id}`"),
        Action::Scroll { direction } => format!(
            "I scroll {}",
            if *direction == ScrollDirection::Up { "up" } else { "down" }
        ),
        Action::Back => "I go back".to_string(),
        Action::OpenApp { app_name } => format!("I open app {app_name}"),
        Action::Wait => "I wait".to_string(),
        Action::Terminate { .. } => "I terminate the episode".to_string(),
    }
}

/// Renders the worker summary carrying the pursued subgoal and whether the
/// action completes it or only makes partial progress.
pub fn render_summary(subgoal: &str, status: &str, action: &Action) -> String {
    format!("subgoal: {subgoal} | status: {status} | {}", intent_phrase(action))
}

/// Inverse of render_summary: (subgoal, status).
pub fn parse_summary(summary: &str) -> Option<(String, String)> {
    let rest = summary.strip_prefix("subgoal: ")?;
    let sep = rest.find(" | status: ")?;
    let subgoal = rest[..sep].to_string();
    let tail = &rest[sep + 11..];
    let end = tail.find(" | ").unwrap_or(tail.len());
    Some((subgoal, tail[..end].to_string()))
}

/// Canonical subgoal grammar used by the oracle manager and worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubgoalKind {
    OpenApp(String),
    Navigate(String),
    Enter { slot: String, value: String },
    Enable(String),
    Finish,
}

impl SubgoalKind {
    pub fn render(&self) -> String {
        match self {
            SubgoalKind::OpenApp(a) => format!("open app {a}"),
            SubgoalKind::Navigate(t) => format!("navigate to {t}"),
            SubgoalKind::Enter { slot, value } => format!("enter '{value}' into {slot}"),
            SubgoalKind::Enable(s) => format!("enable {s}"),
            SubgoalKind::Finish => "finish the task".to_string(),
        }
    }

    pub fn parse(text: &str) -> Option<SubgoalKind> {
        if text == "finish the task" {
            return Some(SubgoalKind::Finish);
        }
        if let Some(a) = text.strip_prefix("open app ") {
            return Some(SubgoalKind::OpenApp(a.to_string()));
        }
        if let Some(t) = text.strip_prefix("navigate to ") {
            return Some(SubgoalKind::Navigate(t.to_string()));
        }
        if let Some(s) = text.strip_prefix("enable ") {
            return Some(SubgoalKind::Enable(s.to_string()));
        }
        if let Some(rest) = text.strip_prefix("enter '") {
            let end = rest.find("' into ")?;
            return Some(SubgoalKind::Enter {
                value: rest[..end].to_string(),
                slot: rest[end + 7..].to_string(),
            });
        }
        None
    }
}

/// One subgoal per non-scroll oracle action, in execution order.
pub fn oracle_subgoals(task: &TaskQuery, world: &World) -> Vec<String> {
    let graph = world.app(task.primary_app());
    let find_widget = |widget_id: &str| {
        graph.and_then(|g| {
            g.screens.iter().find_map(|s| s.widget(widget_id)).cloned()
        })
    };
    let mut out = Vec::new();
    for action in &task.oracle_actions {
        let subgoal = match action {
            Action::OpenApp { app_name } => Some(SubgoalKind::OpenApp(app_name.clone())),
            Action::Terminate { .. } => Some(SubgoalKind::Finish),
            Action::Scroll { .. } | Action::Back | Action::Wait => None,
            Action::Click { widget_id } => find_widget(widget_id).and_then(|w| {
                if let Some(t) = w.target_screen {
                    Some(SubgoalKind::Navigate(t))
                } else {
                    w.slot_key.map(SubgoalKind::Enable)
                }
            }),
            Action::Type { widget_id, text } => find_widget(widget_id).and_then(|w| {
                w.slot_key.map(|slot| SubgoalKind::Enter { slot, value: text.clone() })
            }),
        };
        if let Some(s) = subgoal {
            out.push(s.render());
        }
    }
    out
}

fn screen_of<'a>(world: &'a World, obs: &Observation) -> Option<&'a Screen> {
    let app = obs.app.as_ref()?;
    world.app(app)?.screen(&obs.screen_id)
}

fn word_overlap(a: &str, b: &str) -> bool {
    let split = |t: &str| -> Vec<String> {
        t.to_lowercase()
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|w| w.len() >= 4)
            .map(|w| w.to_string())
            .collect()
    };
    let wa = split(a);
    let wb = split(b);
    wa.iter().any(|x| wb.iter().any(|y| x.contains(y.as_str()) || y.contains(x.as_str())))
}

/// Deterministic role implementation backed by the task's ground truth.
#[derive(Clone)]
pub struct OracleBackend {
    task: TaskQuery,
    world: Arc<World>,
}

impl OracleBackend {
    pub fn new(task: TaskQuery, world: Arc<World>) -> Self {
        OracleBackend { task, world }
    }

    /// Feasibility per subgoal on the current screen; partial progress means
    /// a scroll toward the needed widget.
    fn act_for_subgoal(&self, subgoal: &str, obs: &Observation) -> Option<(Action, &'static str)> {
        let kind = SubgoalKind::parse(subgoal)?;
        match kind {
            SubgoalKind::Finish => {
                Some((Action::Terminate { status: TerminateStatus::Success }, "completes"))
            }
            SubgoalKind::OpenApp(a) => {
                if obs.app.as_deref() == Some(a.as_str()) {
                    return None;
                }
                Some((Action::OpenApp { app_name: a }, "completes"))
            }
            SubgoalKind::Navigate(t) => {
                let screen = screen_of(&self.world, obs)?;
                let widget =
                    screen.widgets.iter().find(|w| w.target_screen.as_deref() == Some(t.as_str()))?;
                self.reach_or_scroll(screen, obs, &widget.widget_id, || Action::Click {
                    widget_id: widget.widget_id.clone(),
                })
            }
            SubgoalKind::Enter { slot, value } => {
                let screen = screen_of(&self.world, obs)?;
                let widget = screen.widgets.iter().find(|w| {
                    w.kind == WidgetKind::Textfield && w.slot_key.as_deref() == Some(slot.as_str())
                })?;
                self.reach_or_scroll(screen, obs, &widget.widget_id, || Action::Type {
                    widget_id: widget.widget_id.clone(),
                    text: value.clone(),
                })
            }
            SubgoalKind::Enable(slot) => {
                let screen = screen_of(&self.world, obs)?;
                let widget = screen.widgets.iter().find(|w| {
                    w.kind == WidgetKind::Checkbox && w.slot_key.as_deref() == Some(slot.as_str())
                })?;
                self.reach_or_scroll(screen, obs, &widget.widget_id, || Action::Click {
                    widget_id: widget.widget_id.clone(),
                })
            }
        }
    }

    fn reach_or_scroll(
        &self,
        screen: &Screen,
        obs: &Observation,
        widget_id: &str,
        make: impl Fn() -> Action,
    ) -> Option<(Action, &'static str)> {
        let widget = screen.widget(widget_id)?;
        let target = screen.page_offset_for(widget);
        let current = obs.scroll_position.0;
        if obs.visible_widgets.iter().any(|w| w.widget_id == widget_id) {
            Some((make(), "completes"))
        } else if target > current {
            Some((Action::Scroll { direction: ScrollDirection::Down }, "partial"))
        } else {
            Some((Action::Scroll { direction: ScrollDirection::Up }, "partial"))
        }
    }
}

impl AgentBackend for OracleBackend {
    fn manager_init(
        &mut self,
        _instruction: &str,
        _s0: &Observation,
        _k_rag: &str,
    ) -> Result<Vec<String>, BackendError> {
        Ok(oracle_subgoals(&self.task, &self.world))
    }

    fn manager_update(
        &mut self,
        _instruction: &str,
        _obs: &Observation,
        prev_action: &ActionRecord,
        feedback: &ReflectionFeedback,
        pending: &[String],
        completed: &[String],
    ) -> Result<ManagerUpdate, BackendError> {
        let mut pending: Vec<String> = pending.to_vec();
        let mut completed: Vec<String> = completed.to_vec();
        if feedback.judgment == Judgment::Success {
            if let Some((subgoal, status)) = parse_summary(&prev_action.summary) {
                if status == "completes" {
                    if let Some(pos) = pending.iter().position(|g| *g == subgoal) {
                        let done = pending.remove(pos);
                        completed.push(done);
                    }
                }
            }
        }
        Ok(ManagerUpdate { pending, completed })
    }

    fn worker_act(
        &mut self,
        _instruction: &str,
        obs: &Observation,
        pending: &[String],
        _last_feedback: Option<&ReflectionFeedback>,
        _notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError> {
        for subgoal in pending.iter().take(N_INSPECT) {
            if let Some((action, status)) = self.act_for_subgoal(subgoal, obs) {
                let thought =
                    format!("the subgoal '{subgoal}' is next; {}", intent_phrase(&action));
                let summary = render_summary(subgoal, status, &action);
                return Ok(WorkerDecision::Act(ActionRecord { thought, action, summary }));
            }
        }
        Ok(WorkerDecision::Infeasible)
    }

    fn reflect(
        &mut self,
        instruction: &str,
        obs_before: &Observation,
        obs_after: &Observation,
        act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError> {
        Ok(oracle_reflect(instruction, obs_before, obs_after, act))
    }

    fn take_notes(&mut self, obs: &Observation) -> Result<BTreeMap<String, String>, BackendError> {
        Ok(oracle_notes(obs))
    }
}

/// Default count of top pending subgoals the worker inspects for feasibility.
pub const N_INSPECT: usize = 3;

/// Rule-based reflection shared by the oracle backend: SUCCESS iff the
/// observation changed exactly when the action implies it should, and the
/// step is consistent with the instruction's recoverable constraints.
pub fn oracle_reflect(
    instruction: &str,
    obs_before: &Observation,
    obs_after: &Observation,
    act: &ActionRecord,
) -> ReflectionFeedback {
    let changed = obs_before.serialized != obs_after.serialized;
    let expected = match &act.action {
        Action::Wait | Action::Terminate { .. } => false,
        Action::Back => obs_before.app.is_some(),
        Action::Scroll { direction } => {
            let (offset, max) = obs_before.scroll_position;
            match direction {
                ScrollDirection::Down => offset < max,
                ScrollDirection::Up => offset > 0,
            }
        }
        Action::Click { .. } | Action::Type { .. } | Action::OpenApp { .. } => true,
    };
    if changed != expected {
        let feedback = if expected {
            format!("action {} did not proceed; screen unchanged", act.action)
        } else {
            format!("action {} unexpectedly changed the screen", act.action)
        };
        return ReflectionFeedback { judgment: Judgment::Failure, feedback };
    }
    let constraints = parse_instruction_constraints(instruction);
    if let Action::Type { widget_id, text } = &act.action {
        let label = obs_before
            .visible_widgets
            .iter()
            .find(|w| w.widget_id == *widget_id)
            .map(|w| w.label.clone())
            .unwrap_or_default();
        for (slot, wanted) in &constraints {
            if word_overlap(&label, slot) && text != wanted {
                return ReflectionFeedback {
                    judgment: Judgment::Failure,
                    feedback: format!(
                        "entered '{text}' into {slot} but the task wants '{wanted}'"
                    ),
                };
            }
        }
    }
    if let Action::Terminate { status: TerminateStatus::Success } = &act.action {
        if let Some(goal_screen) = parse_goal_screen(instruction) {
            if obs_before.screen_id != goal_screen {
                return ReflectionFeedback {
                    judgment: Judgment::Failure,
                    feedback: format!(
                        "terminated on {} before reaching {goal_screen}",
                        obs_before.screen_id
                    ),
                };
            }
        }
    }
    ReflectionFeedback {
        judgment: Judgment::Success,
        feedback: "the action had the expected effect".to_string(),
    }
}

/// Note-worthy visible values: slot contents keyed by widget id, plus
/// "key: value" list items (on-screen codes).
pub fn oracle_notes(obs: &Observation) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for w in &obs.visible_widgets {
        if w.kind == WidgetKind::ListItem {
            if let Some((key, value)) = w.label.split_once(": ") {
                out.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        if let Some(v) = &w.current_value {
            if !v.is_empty() {
                out.insert(w.widget_id.clone(), v.clone());
            }
        }
    }
    out
}

/// Oracle worker wrapper injecting errors at rate rho: wrong widget,
/// malformed emission, or premature Terminate.
pub struct NoisyOracle {
    inner: OracleBackend,
    rho: f64,
    rng: ChaCha8Rng,
}

impl NoisyOracle {
    pub fn new(inner: OracleBackend, rho: f64, seed: u64) -> Self {
        NoisyOracle { inner, rho, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl AgentBackend for NoisyOracle {
    fn manager_init(
        &mut self,
        instruction: &str,
        s0: &Observation,
        k_rag: &str,
    ) -> Result<Vec<String>, BackendError> {
        self.inner.manager_init(instruction, s0, k_rag)
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
        self.inner.manager_update(instruction, obs, prev_action, feedback, pending, completed)
    }

    fn worker_act(
        &mut self,
        instruction: &str,
        obs: &Observation,
        pending: &[String],
        last_feedback: Option<&ReflectionFeedback>,
        notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError> {
        let decision = self.inner.worker_act(instruction, obs, pending, last_feedback, notes)?;
        if self.rng.gen::<f64>() >= self.rho {
            return Ok(decision);
        }
        let head = pending.first().cloned().unwrap_or_default();
        match self.rng.gen_range(0..3u32) {
            0 => {
                // Wrong widget: retarget the action at a widget that is not there.
                if let WorkerDecision::Act(mut rec) = decision {
                    match &mut rec.action {
                        Action::Click { widget_id } | Action::Type { widget_id, .. } => {
                            *widget_id = "bogus_widget".to_string();
                        }
                        other => *other = Action::Click { widget_id: "bogus_widget".to_string() },
                    }
                    rec.thought = format!("the subgoal '{head}' is next; {}", intent_phrase(&rec.action));
                    Ok(WorkerDecision::Act(rec))
                } else {
                    Ok(decision)
                }
            }
            1 => Ok(WorkerDecision::Malformed { raw: "%%% unparsable emission %%%".to_string() }),
            _ => {
                let action = Action::Terminate { status: TerminateStatus::Success };
                Ok(WorkerDecision::Act(ActionRecord {
                    thought: format!("the subgoal '{head}' is next; {}", intent_phrase(&action)),
                    summary: render_summary(&head, "completes", &action),
                    action,
                }))
            }
        }
    }

    fn reflect(
        &mut self,
        instruction: &str,
        obs_before: &Observation,
        obs_after: &Observation,
        act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError> {
        self.inner.reflect(instruction, obs_before, obs_after, act)
    }

    fn take_notes(&mut self, obs: &Observation) -> Result<BTreeMap<String, String>, BackendError> {
        self.inner.take_notes(obs)
    }
}

/// Worker role driven by the toy policy; other roles are unsupported and
/// should be paired with oracle backends.
pub struct LearnedWorker {
    pub policy: PolicyParams,
    pub app_names: Vec<String>,
    rng: ChaCha8Rng,
}

impl LearnedWorker {
    pub fn new(policy: PolicyParams, app_names: Vec<String>, seed: u64) -> Self {
        LearnedWorker { policy, app_names, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl AgentBackend for LearnedWorker {
    fn manager_init(
        &mut self,
        _instruction: &str,
        _s0: &Observation,
        _k_rag: &str,
    ) -> Result<Vec<String>, BackendError> {
        Err(BackendError::Unsupported("manager_init"))
    }

    fn manager_update(
        &mut self,
        _instruction: &str,
        _obs: &Observation,
        _prev_action: &ActionRecord,
        _feedback: &ReflectionFeedback,
        _pending: &[String],
        _completed: &[String],
    ) -> Result<ManagerUpdate, BackendError> {
        Err(BackendError::Unsupported("manager_update"))
    }

    fn worker_act(
        &mut self,
        instruction: &str,
        obs: &Observation,
        pending: &[String],
        _last_feedback: Option<&ReflectionFeedback>,
        _notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError> {
        let ctx = PolicyContext {
            instruction: instruction.to_string(),
            observation: obs.clone(),
            history_len: 0,
            app_names: self.app_names.clone(),
        };
        if enumerate_candidates(&ctx).is_empty() {
            return Ok(WorkerDecision::Infeasible);
        }
        let (action, _) = self.policy.sample(&ctx, &mut self.rng);
        let head = pending.first().cloned().unwrap_or_default();
        Ok(WorkerDecision::Act(ActionRecord {
            thought: format!("the subgoal '{head}' is next; {}", intent_phrase(&action)),
            summary: render_summary(&head, "completes", &action),
            action,
        }))
    }

    fn reflect(
        &mut self,
        _instruction: &str,
        _obs_before: &Observation,
        _obs_after: &Observation,
        _act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError> {
        Err(BackendError::Unsupported("reflect"))
    }

    fn take_notes(&mut self, _obs: &Observation) -> Result<BTreeMap<String, String>, BackendError> {
        Err(BackendError::Unsupported("take_notes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gui_sim::Env;
    use crate::taskgen::{task_from_path, InstructionStyle, SampledPath};

    fn takeout_task() -> (TaskQuery, Arc<World>) {
        let world = fixtures::takeout_world();
        let graph = world.app("TakeoutApp").unwrap().clone();
        let path = SampledPath {
            app_name: "TakeoutApp".into(),
            screens: vec!["home".into(), "menu".into(), "cart".into()],
            descriptions: vec![String::new(); 3],
            slot_bindings: vec![("search".into(), "pizza".into())],
        };
        (task_from_path(&graph, &path, "t0".into(), InstructionStyle::Explicit), world)
    }

    #[test]
    fn oracle_subgoals_segment_the_action_phases() {
        let (task, world) = takeout_task();
        let subgoals = oracle_subgoals(&task, &world);
        assert_eq!(
            subgoals,
            vec![
                "open app TakeoutApp",
                "navigate to menu",
                "enter 'pizza' into search",
                "navigate to cart",
                "finish the task",
            ]
        );
        for g in &subgoals {
            assert!(SubgoalKind::parse(g).is_some(), "unparsable subgoal {g}");
        }
    }

    #[test]
    fn summary_roundtrips_subgoal_and_status() {
        let action = Action::Click { widget_id: "to_cart".into() };
        let s = render_summary("navigate to cart", "completes", &action);
        assert_eq!(parse_summary(&s), Some(("navigate to cart".into(), "completes".into())));
    }

    #[test]
    fn worker_scrolls_toward_offscreen_widget() {
        let (task, world) = takeout_task();
        let mut env = Env::new(world.clone());
        env.reset(&[]).unwrap();
        env.step(&Action::OpenApp { app_name: "TakeoutApp".into() }).unwrap();
        env.step(&Action::Click { widget_id: "to_menu".into() }).unwrap();
        let obs = env.observe();
        let mut backend = OracleBackend::new(task, world);
        // promo_toggle sits on the second page of the menu screen.
        let decision = backend
            .worker_act("x", &obs, &["enable promo".to_string()], None, &BTreeMap::new())
            .unwrap();
        match decision {
            WorkerDecision::Act(rec) => {
                assert_eq!(rec.action, Action::Scroll { direction: ScrollDirection::Down });
                assert!(rec.summary.contains("status: partial"));
            }
            other => panic!("expected scroll, got {other:?}"),
        }
    }

    #[test]
    fn worker_skips_infeasible_head_for_feasible_second_subgoal() {
        let (task, world) = takeout_task();
        let mut env = Env::new(world.clone());
        env.reset(&[]).unwrap();
        env.step(&Action::OpenApp { app_name: "TakeoutApp".into() }).unwrap();
        let obs = env.observe();
        let mut backend = OracleBackend::new(task, world);
        // tip lives on the cart screen (infeasible here); to_menu nav is feasible.
        let pending = vec!["enter '5' into tip".to_string(), "navigate to menu".to_string()];
        let decision = backend.worker_act("x", &obs, &pending, None, &BTreeMap::new()).unwrap();
        match decision {
            WorkerDecision::Act(rec) => {
                assert_eq!(rec.action, Action::Click { widget_id: "to_menu".into() });
            }
            other => panic!("expected nav click, got {other:?}"),
        }
    }

    #[test]
    fn reflect_flags_noop_click_and_counter_goal_type() {
        let (task, world) = takeout_task();
        let mut env = Env::new(world.clone());
        env.reset(&[]).unwrap();
        env.step(&Action::OpenApp { app_name: "TakeoutApp".into() }).unwrap();
        env.step(&Action::Click { widget_id: "to_menu".into() }).unwrap();
        let before = env.observe();
        let action = Action::Click { widget_id: "bogus_widget".into() };
        let (after, _) = env.step(&action).unwrap();
        let rec = ActionRecord {
            thought: intent_phrase(&action),
            summary: render_summary("navigate to cart", "completes", &action),
            action,
        };
        let f = oracle_reflect(&task.instruction, &before, &after, &rec);
        assert_eq!(f.judgment, Judgment::Failure);
        assert!(!f.feedback.is_empty());

        // Writing a value that contradicts the recoverable goal constraint.
        let before = env.observe();
        let action = Action::Type { widget_id: "search_box".into(), text: "burger".into() };
        let (after, _) = env.step(&action).unwrap();
        let rec = ActionRecord {
            thought: intent_phrase(&action),
            summary: render_summary("enter 'pizza' into search", "completes", &action),
            action,
        };
        let f = oracle_reflect(&task.instruction, &before, &after, &rec);
        assert_eq!(f.judgment, Judgment::Failure);
        assert!(f.feedback.contains("pizza"));
    }

    #[test]
    fn notes_capture_codes_and_slot_values() {
        let world = fixtures::takeout_world();
        let mut env = Env::new(world);
        env.reset(&[]).unwrap();
        env.step(&Action::OpenApp { app_name: "TakeoutApp".into() }).unwrap();
        env.step(&Action::Click { widget_id: "to_menu".into() }).unwrap();
        env.step(&Action::Type { widget_id: "search_box".into(), text: "pizza".into() }).unwrap();
        env.step(&Action::Click { widget_id: "to_cart".into() }).unwrap();
        let notes = oracle_notes(&env.observe());
        assert_eq!(notes.get("order_code").map(String::as_str), Some("X9"));
    }
}
