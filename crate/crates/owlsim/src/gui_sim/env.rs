//! Environment state, actions, observations, and the transition function.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{AppGraph, Screen, Widget, WidgetKind};

/// Maximum back-stack depth; the oldest entry is dropped beyond this.
pub const NAV_STACK_MAX: usize = 64;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown app '{0}'")]
    UnknownApp(String),
    #[error("episode already terminated")]
    EpisodeTerminated,
    #[error("environment was not reset")]
    NotReset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScrollDirection {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminateStatus {
    Success,
    Failure,
}

/// Mobile-style action set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Click { widget_id: String },
    Type { widget_id: String, text: String },
    Scroll { direction: ScrollDirection },
    Back,
    OpenApp { app_name: String },
    Wait,
    Terminate { status: TerminateStatus },
}

impl Action {
    pub fn variant_name(&self) -> &'static str {
        match self {
            Action::Click { .. } => "Click",
            Action::Type { .. } => "Type",
            Action::Scroll { .. } => "Scroll",
            Action::Back => "Back",
            Action::OpenApp { .. } => "OpenApp",
            Action::Wait => "Wait",
            Action::Terminate { .. } => "Terminate",
        }
    }

    pub fn target_widget(&self) -> Option<&str> {
        match self {
            Action::Click { widget_id } | Action::Type { widget_id, .. } => Some(widget_id),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Click { widget_id } => write!(f, "click({widget_id})"),
            Action::Type { widget_id, text } => write!(f, "type({widget_id}, '{text}')"),
            Action::Scroll { direction } => {
                write!(f, "scroll({})", if *direction == ScrollDirection::Up { "up" } else { "down" })
            }
            Action::Back => write!(f, "back"),
            Action::OpenApp { app_name } => write!(f, "open_app({app_name})"),
            Action::Wait => write!(f, "wait"),
            Action::Terminate { status } => write!(
                f,
                "terminate({})",
                if *status == TerminateStatus::Success { "success" } else { "failure" }
            ),
        }
    }
}

/// Machine-checkable goal: required slot values plus an optional final screen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub slot_constraints: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal_screen: Option<String>,
}

/// Immutable registry of installed app graphs, shareable across episodes.
#[derive(Debug, Clone, Default)]
pub struct World {
    apps: BTreeMap<String, Arc<AppGraph>>,
}

impl World {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, graph: AppGraph) {
        self.apps.insert(graph.app_name.clone(), Arc::new(graph));
    }

    pub fn app(&self, name: &str) -> Option<&Arc<AppGraph>> {
        self.apps.get(name)
    }

    pub fn app_names(&self) -> Vec<String> {
        self.apps.keys().cloned().collect()
    }

    pub fn apps(&self) -> impl Iterator<Item = &Arc<AppGraph>> {
        self.apps.values()
    }

    /// Finds the screen hosting an editing widget for `slot_key` in `app`.
    pub fn screen_for_slot(&self, app: &str, slot_key: &str) -> Option<&Screen> {
        let graph = self.apps.get(app)?;
        graph
            .screens
            .iter()
            .find(|s| s.widgets.iter().any(|w| w.slot_key.as_deref() == Some(slot_key)))
    }
}

/// Full mutable device state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub current_app: Option<String>,
    pub current_screen: String,
    pub scroll_offset: u32,
    pub slot_values: BTreeMap<String, String>,
    pub nav_stack: Vec<(String, String, u32)>,
    pub step_count: u32,
    pub terminated: Option<TerminateStatus>,
}

impl EnvState {
    fn device_home() -> Self {
        EnvState {
            current_app: None,
            current_screen: String::new(),
            scroll_offset: 0,
            slot_values: BTreeMap::new(),
            nav_stack: Vec::new(),
            step_count: 0,
            terminated: None,
        }
    }
}

/// Ground-truth snapshot handed to oracle critics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub current_app: Option<String>,
    pub current_screen: String,
    pub scroll_offset: u32,
    pub slot_values: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleWidget {
    pub widget_id: String,
    pub kind: WidgetKind,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current_value: Option<String>,
}

/// Structured observation; `serialized` is a pure text rendering of the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub app: Option<String>,
    pub screen_id: String,
    pub screen_description: String,
    pub visible_widgets: Vec<VisibleWidget>,
    pub scroll_position: (u32, u32),
    pub serialized: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub state_changed: bool,
    pub description: String,
    pub malformed: bool,
    /// The action targeted a widget that is not currently visible (no-op).
    #[serde(default, skip_serializing)]
    pub invalid_target: bool,
}

/// One episode's environment instance; single-owner, driven step by step.
#[derive(Debug, Clone)]
pub struct Env {
    world: Arc<World>,
    state: EnvState,
    was_reset: bool,
}

impl Env {
    pub fn new(world: Arc<World>) -> Self {
        Env { world, state: EnvState::device_home(), was_reset: false }
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            current_app: self.state.current_app.clone(),
            current_screen: self.state.current_screen.clone(),
            scroll_offset: self.state.scroll_offset,
            slot_values: self.state.slot_values.clone(),
        }
    }

    /// Resets to the device home with empty slots and step_count 0.
    pub fn reset(&mut self, app_names: &[String]) -> Result<Observation, EnvError> {
        for app in app_names {
            if self.world.app(app).is_none() {
                return Err(EnvError::UnknownApp(app.clone()));
            }
        }
        self.state = EnvState::device_home();
        self.was_reset = true;
        Ok(self.observe())
    }

    fn current_screen_def(&self) -> Option<(&Arc<AppGraph>, &Screen)> {
        let app = self.state.current_app.as_ref()?;
        let graph = self.world.app(app)?;
        let screen = graph.screen(&self.state.current_screen)?;
        Some((graph, screen))
    }

    /// Widget visible iff its visible_from_scroll falls inside the viewport window
    /// [scroll_offset, scroll_offset + viewport_size).
    fn widget_visible(screen: &Screen, widget: &Widget, scroll_offset: u32) -> bool {
        widget.visible_from_scroll >= scroll_offset
            && widget.visible_from_scroll < scroll_offset + screen.viewport_size
    }

    pub fn observe(&self) -> Observation {
        match self.current_screen_def() {
            None => {
                let apps = self.world.app_names().join(", ");
                let serialized = format!("[device home] installed apps: {apps}");
                Observation {
                    app: None,
                    screen_id: "device_home".into(),
                    screen_description: "device home screen".into(),
                    visible_widgets: Vec::new(),
                    scroll_position: (0, 0),
                    serialized,
                }
            }
            Some((_, screen)) => {
                let offset = self.state.scroll_offset;
                let visible: Vec<VisibleWidget> = screen
                    .widgets
                    .iter()
                    .filter(|w| Self::widget_visible(screen, w, offset))
                    .map(|w| VisibleWidget {
                        widget_id: w.widget_id.clone(),
                        kind: w.kind,
                        label: w.label.clone(),
                        current_value: w
                            .slot_key
                            .as_ref()
                            .and_then(|k| self.state.slot_values.get(k).cloned()),
                    })
                    .collect();
                let max = screen.max_scroll_offset();
                let mut serialized = format!(
                    "[{}/{}] {} (scroll {}/{})",
                    self.state.current_app.as_deref().unwrap_or(""),
                    screen.screen_id,
                    screen.description,
                    offset,
                    max
                );
                for w in &visible {
                    serialized.push_str(&format!(
                        "\n- {} [{}] '{}'{}",
                        w.widget_id,
                        w.kind.as_str(),
                        w.label,
                        w.current_value
                            .as_ref()
                            .map(|v| format!(" = '{v}'"))
                            .unwrap_or_default()
                    ));
                }
                Observation {
                    app: self.state.current_app.clone(),
                    screen_id: screen.screen_id.clone(),
                    screen_description: screen.description.clone(),
                    visible_widgets: visible,
                    scroll_position: (offset, max),
                    serialized,
                }
            }
        }
    }

    /// Executes one action. Acting on an invisible or unknown widget is a
    /// recorded no-op (state_changed = false), not an error.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, TransitionReport), EnvError> {
        if !self.was_reset {
            return Err(EnvError::NotReset);
        }
        if self.state.terminated.is_some() {
            return Err(EnvError::EpisodeTerminated);
        }
        let before = self.state.clone();
        let mut invalid_target = false;

        match action {
            Action::Wait => {}
            Action::Terminate { status } => {
                self.state.terminated = Some(*status);
            }
            Action::OpenApp { app_name } => {
                if let Some(graph) = self.world.app(app_name) {
                    let home = graph.home_screen.clone();
                    let already_home = before.current_app.as_deref() == Some(app_name)
                        && before.current_screen == home
                        && before.scroll_offset == 0;
                    if !already_home {
                        if let Some(prev_app) = &before.current_app {
                            self.push_nav(prev_app.clone(), before.current_screen.clone(), before.scroll_offset);
                        }
                        self.state.current_app = Some(app_name.clone());
                        self.state.current_screen = home;
                        self.state.scroll_offset = 0;
                    }
                } else {
                    invalid_target = true;
                }
            }
            Action::Back => {
                if let Some((app, screen, offset)) = self.state.nav_stack.pop() {
                    self.state.current_app = Some(app);
                    self.state.current_screen = screen;
                    self.state.scroll_offset = offset;
                } else if self.state.current_app.is_some() {
                    self.state.current_app = None;
                    self.state.current_screen = String::new();
                    self.state.scroll_offset = 0;
                }
                // Back at the device home is a no-op.
            }
            Action::Scroll { direction } => {
                if let Some((_, screen)) = self.current_screen_def() {
                    let page = screen.viewport_size;
                    let max = screen.max_scroll_offset();
                    let offset = self.state.scroll_offset;
                    let next = match direction {
                        ScrollDirection::Down => (offset + page).min(max),
                        ScrollDirection::Up => offset.saturating_sub(page),
                    };
                    self.state.scroll_offset = next;
                }
            }
            Action::Click { widget_id } => match self.visible_widget(widget_id) {
                Some(widget) => {
                    if let Some(target) = &widget.target_screen {
                        let target = target.clone();
                        let app = self.state.current_app.clone().unwrap();
                        self.push_nav(app, before.current_screen.clone(), before.scroll_offset);
                        self.state.current_screen = target;
                        self.state.scroll_offset = 0;
                    } else if widget.kind == WidgetKind::Checkbox {
                        let key = widget.slot_key.clone().unwrap();
                        let entry = self.state.slot_values.entry(key).or_default();
                        *entry = if entry == "true" { "false".into() } else { "true".into() };
                    }
                    // Clicking a textfield or inert widget changes no state.
                }
                None => invalid_target = true,
            },
            Action::Type { widget_id, text } => match self.visible_widget(widget_id) {
                Some(widget) if widget.kind == WidgetKind::Textfield && widget.slot_key.is_some() => {
                    let key = widget.slot_key.clone().unwrap();
                    self.state.slot_values.insert(key, text.clone());
                }
                _ => invalid_target = true,
            },
        }

        self.state.step_count = before.step_count + 1;
        let after = self.state.clone();
        let state_changed = changed(&before, &after);
        let description = describe_effect(&self.world, &before, action, &after);
        let obs = self.observe();
        Ok((
            obs,
            TransitionReport { state_changed, description, malformed: false, invalid_target },
        ))
    }

    fn push_nav(&mut self, app: String, screen: String, offset: u32) {
        if self.state.nav_stack.len() >= NAV_STACK_MAX {
            self.state.nav_stack.remove(0);
        }
        self.state.nav_stack.push((app, screen, offset));
    }

    fn visible_widget(&self, widget_id: &str) -> Option<Widget> {
        let (_, screen) = self.current_screen_def()?;
        let widget = screen.widget(widget_id)?;
        if Self::widget_visible(screen, widget, self.state.scroll_offset) {
            Some(widget.clone())
        } else {
            None
        }
    }
}

fn changed(before: &EnvState, after: &EnvState) -> bool {
    before.current_app != after.current_app
        || before.current_screen != after.current_screen
        || before.scroll_offset != after.scroll_offset
        || before.slot_values != after.slot_values
        || before.terminated != after.terminated
}

/// Deterministic natural-language description of a transition.
pub fn describe_effect(world: &World, before: &EnvState, action: &Action, after: &EnvState) -> String {
    if !changed(before, after) {
        if let Action::Click { widget_id } = action {
            // A click on a textfield activates it without changing state.
            if let Some(app) = &before.current_app {
                if let Some(screen) =
                    world.app(app).and_then(|g| g.screen(&before.current_screen))
                {
                    if let Some(w) = screen.widget(widget_id) {
                        if w.kind == WidgetKind::Textfield {
                            return format!("clicked and activated the {}", w.label);
                        }
                    }
                }
            }
        }
        return "no state change".to_string();
    }
    match action {
        Action::OpenApp { app_name } => {
            format!("opened app {} showing {}", app_name, after.current_screen)
        }
        Action::Back => {
            if after.current_app.is_none() {
                format!("navigated back from {} to the device home", before.current_screen)
            } else {
                format!("navigated back from {} to {}", before.current_screen, after.current_screen)
            }
        }
        Action::Scroll { direction } => format!(
            "scrolled {} on {}",
            if *direction == ScrollDirection::Up { "up" } else { "down" },
            before.current_screen
        ),
        Action::Click { widget_id } => {
            if before.current_screen != after.current_screen {
                format!("navigated from {} to {}", before.current_screen, after.current_screen)
            } else {
                // Checkbox toggle.
                let slot = before
                    .current_app
                    .as_ref()
                    .and_then(|a| world.app(a))
                    .and_then(|g| g.screen(&before.current_screen))
                    .and_then(|s| s.widget(widget_id))
                    .and_then(|w| w.slot_key.clone())
                    .unwrap_or_else(|| widget_id.clone());
                let value = after.slot_values.get(&slot).cloned().unwrap_or_default();
                format!("toggled {} to {} on {} screen", slot, value, before.current_screen)
            }
        }
        Action::Type { widget_id, text } => {
            let slot = before
                .current_app
                .as_ref()
                .and_then(|a| world.app(a))
                .and_then(|g| g.screen(&before.current_screen))
                .and_then(|s| s.widget(widget_id))
                .and_then(|w| w.slot_key.clone())
                .unwrap_or_else(|| widget_id.clone());
            format!("entered '{}' into {} field on {} screen", text, slot, before.current_screen)
        }
        Action::Terminate { status } => format!(
            "terminated the episode with status {}",
            if *status == TerminateStatus::Success { "success" } else { "failure" }
        ),
        Action::Wait => "no state change".to_string(),
    }
}

/// True iff every goal slot constraint holds and, when the goal names a
/// screen, the device is on it. Pure function of the state.
pub fn goal_satisfied(state: &EnvSnapshot, goal: &Goal) -> bool {
    for (slot, required) in &goal.slot_constraints {
        if state.slot_values.get(slot) != Some(required) {
            return false;
        }
    }
    match &goal.goal_screen {
        Some(screen) => state.current_screen == *screen,
        None => true,
    }
}
