//! DAG-based task generation: path sampling, instruction synthesis,
//! replay validation, and pool generation with oracle action sequences.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gui_sim::{
    goal_satisfied, Action, AppGraph, Env, Goal, TerminateStatus, WidgetKind, World,
};

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("exhausted after {0} consecutive resamples failed validation")]
    Exhaustion(u32),
}

/// A generated instruction with a machine-checkable goal and an oracle
/// action sequence that solves it from reset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskQuery {
    pub task_id: String,
    pub instruction: String,
    pub app_names: Vec<String>,
    pub goal: Goal,
    pub oracle_actions: Vec<Action>,
    pub difficulty: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
}

impl TaskQuery {
    pub fn primary_app(&self) -> &str {
        &self.app_names[0]
    }
}

/// A directed path on an app graph plus slot bindings chosen along it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPath {
    pub app_name: String,
    pub screens: Vec<String>,
    pub descriptions: Vec<String>,
    pub slot_bindings: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstructionStyle {
    Explicit,
    Natural,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub success: bool,
    pub invalid_steps: Vec<usize>,
}

/// Candidate values per slot; checkboxes always bind "true".
pub fn value_pool(slot_key: &str) -> Vec<&'static str> {
    match slot_key {
        "search" => vec!["pizza", "burger", "sushi"],
        "note" => vec!["extra napkins", "no onions"],
        "tip" => vec!["5", "10"],
        "coupon" => vec!["SAVE10", "WELCOME"],
        "title" => vec!["groceries", "travel plans"],
        "body" => vec!["buy milk", "call alice"],
        "recipient" => vec!["alice", "bob"],
        "city" => vec!["Paris", "Tokyo", "Berlin"],
        "alarm" => vec!["07:00", "08:30"],
        _ => vec!["alpha", "beta", "gamma"],
    }
}

/// Samples a directed path from the home screen with 0-3 slot bindings.
pub fn sample_path(graph: &AppGraph, rng: &mut ChaCha8Rng, max_len: usize) -> SampledPath {
    assert!(max_len >= 1);
    let mut screens = vec![graph.home_screen.clone()];
    loop {
        if screens.len() >= max_len {
            break;
        }
        let current = graph.screen(screens.last().unwrap()).unwrap();
        let mut targets: Vec<&str> = Vec::new();
        for w in &current.widgets {
            if let Some(t) = &w.target_screen {
                if !targets.contains(&t.as_str()) {
                    targets.push(t);
                }
            }
        }
        if targets.is_empty() {
            break;
        }
        if screens.len() >= 2 && rng.gen_bool(0.15) {
            break;
        }
        let next = targets[rng.gen_range(0..targets.len())];
        screens.push(next.to_string());
    }

    // Editing widgets reachable along the path, in visit order.
    let mut editable: Vec<(String, WidgetKind)> = Vec::new();
    for sid in &screens {
        let screen = graph.screen(sid).unwrap();
        for w in &screen.widgets {
            if let Some(slot) = &w.slot_key {
                if !editable.iter().any(|(s, _)| s == slot) {
                    editable.push((slot.clone(), w.kind));
                }
            }
        }
    }
    let count = rng.gen_range(0..=editable.len().min(3));
    let mut indices: Vec<usize> = (0..editable.len()).collect();
    indices.shuffle(rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(count).collect();
    chosen.sort_unstable();
    let slot_bindings = chosen
        .into_iter()
        .map(|i| {
            let (slot, kind) = &editable[i];
            let value = if *kind == WidgetKind::Checkbox {
                "true".to_string()
            } else {
                let pool = value_pool(slot);
                pool[rng.gen_range(0..pool.len())].to_string()
            };
            (slot.clone(), value)
        })
        .collect();

    let descriptions = screens
        .iter()
        .map(|sid| graph.screen(sid).unwrap().description.clone())
        .collect();
    SampledPath { app_name: graph.app_name.clone(), screens, descriptions, slot_bindings }
}

fn bindings_for_screen<'a>(
    graph: &AppGraph,
    path: &'a SampledPath,
    index: usize,
) -> Vec<(&'a str, &'a str, String)> {
    // A binding belongs to the first path screen whose widgets can edit it.
    let mut out = Vec::new();
    for (slot, value) in &path.slot_bindings {
        let owner = path.screens.iter().position(|sid| {
            graph
                .screen(sid)
                .map(|s| s.widgets.iter().any(|w| w.slot_key.as_deref() == Some(slot)))
                .unwrap_or(false)
        });
        if owner == Some(index) {
            let screen = graph.screen(&path.screens[index]).unwrap();
            let widget = screen
                .widgets
                .iter()
                .find(|w| w.slot_key.as_deref() == Some(slot))
                .unwrap();
            out.push((slot.as_str(), value.as_str(), widget.widget_id.clone()));
        }
    }
    out
}

/// Renders the path as an instruction; both styles quote every binding value
/// so the goal stays recoverable from the text.
pub fn synthesize_instruction(graph: &AppGraph, path: &SampledPath, style: InstructionStyle) -> String {
    let last = path.screens.last().unwrap();
    match style {
        InstructionStyle::Explicit => {
            let mut parts = vec![format!("Open {}", path.app_name)];
            for (i, _) in path.screens.iter().enumerate() {
                for (slot, value, _) in bindings_for_screen(graph, path, i) {
                    parts.push(format!("set {slot} to '{value}'"));
                }
                if i + 1 < path.screens.len() {
                    parts.push(format!("go to {}", path.screens[i + 1]));
                }
            }
            format!("{}, finishing on {}.", parts.join(", then "), last)
        }
        InstructionStyle::Natural => {
            if path.slot_bindings.is_empty() {
                format!("In {}, end up on the {} screen.", path.app_name, last)
            } else {
                let wants: Vec<String> = path
                    .slot_bindings
                    .iter()
                    .map(|(slot, value)| format!("{slot} set as '{value}'"))
                    .collect();
                format!(
                    "In {}, I want {}, ending at the {} screen.",
                    path.app_name,
                    wants.join(" and "),
                    last
                )
            }
        }
    }
}

/// Inverse of the explicit template: recovers the slot constraints.
/// Also understands the natural style's "{slot} set as '{value}'" fragments.
pub fn parse_instruction_constraints(instruction: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut rest = instruction;
    while let Some(pos) = rest.find("set ") {
        let tail = &rest[pos + 4..];
        if let Some(to_pos) = tail.find(" to '") {
            let slot = &tail[..to_pos];
            let after = &tail[to_pos + 5..];
            if let Some(end) = after.find('\'') {
                if !slot.contains(' ') {
                    out.insert(slot.to_string(), after[..end].to_string());
                }
                rest = &after[end + 1..];
                continue;
            }
        }
        rest = &rest[pos + 4..];
    }
    // natural style: "{slot} set as '{value}'"
    let mut rest = instruction;
    while let Some(pos) = rest.find(" set as '") {
        let head = &rest[..pos];
        let slot = head.rsplit(|c: char| c.is_whitespace() || c == ',').next().unwrap_or("");
        let after = &rest[pos + 9..];
        if let Some(end) = after.find('\'') {
            if !slot.is_empty() {
                out.insert(slot.to_string(), after[..end].to_string());
            }
            rest = &after[end + 1..];
        } else {
            break;
        }
    }
    out
}

/// Recovers the final-screen constraint from either instruction style.
pub fn parse_goal_screen(instruction: &str) -> Option<String> {
    if let Some(pos) = instruction.find("finishing on ") {
        let rest = &instruction[pos + 13..];
        let end = rest.find('.').unwrap_or(rest.len());
        return Some(rest[..end].to_string());
    }
    if let Some(pos) = instruction.find("ending at the ") {
        let rest = &instruction[pos + 14..];
        if let Some(end) = rest.find(" screen") {
            return Some(rest[..end].to_string());
        }
    }
    None
}

/// All single-quoted substrings, in order of appearance.
pub fn extract_quoted(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('\'') {
        let after = &rest[start + 1..];
        match after.find('\'') {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

/// First backtick-delimited token, used as the widget reference in
/// generated reasoning and summaries.
pub fn extract_backticked(text: &str) -> Option<String> {
    let start = text.find('`')?;
    let after = &text[start + 1..];
    let end = after.find('`')?;
    Some(after[..end].to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionIntent {
    pub variant: &'static str,
    pub target_widget: Option<String>,
    pub value: Option<String>,
}

/// Extracts the declared action intent from reasoning or summary text.
pub fn extract_action_intent(text: &str) -> Option<ActionIntent> {
    let lower = text.to_lowercase();
    let variant = if lower.contains("terminate") || lower.contains("finish the task") {
        "Terminate"
    } else if lower.contains("open app") || lower.contains("open the app") {
        "OpenApp"
    } else if lower.contains("scroll") {
        "Scroll"
    } else if lower.contains("go back") || lower.contains("navigate back") {
        "Back"
    } else if lower.contains("enter") || lower.contains("type") {
        "Type"
    } else if lower.contains("click") || lower.contains("tap") {
        "Click"
    } else if lower.contains("wait") {
        "Wait"
    } else {
        return None;
    };
    Some(ActionIntent {
        variant,
        target_widget: extract_backticked(text),
        value: extract_quoted(text).into_iter().next(),
    })
}

/// Derives the oracle action sequence: scrolls to reach each widget's page,
/// edits in path order, navigation clicks between screens, final Terminate.
pub fn oracle_actions_for_path(graph: &AppGraph, path: &SampledPath) -> Vec<Action> {
    let mut actions = vec![Action::OpenApp { app_name: path.app_name.clone() }];
    let mut offset: u32 = 0;
    for (i, sid) in path.screens.iter().enumerate() {
        let screen = graph.screen(sid).unwrap();
        for (_, value, widget_id) in bindings_for_screen(graph, path, i) {
            let widget = screen.widget(&widget_id).unwrap();
            push_scrolls(&mut actions, &mut offset, screen.page_offset_for(widget), screen.viewport_size);
            if widget.kind == WidgetKind::Checkbox {
                actions.push(Action::Click { widget_id: widget_id.clone() });
            } else {
                actions.push(Action::Type { widget_id: widget_id.clone(), text: value.to_string() });
            }
        }
        if i + 1 < path.screens.len() {
            let next = &path.screens[i + 1];
            let nav = screen
                .widgets
                .iter()
                .find(|w| w.target_screen.as_deref() == Some(next))
                .expect("consecutive path screens are connected");
            push_scrolls(&mut actions, &mut offset, screen.page_offset_for(nav), screen.viewport_size);
            actions.push(Action::Click { widget_id: nav.widget_id.clone() });
            offset = 0;
        }
    }
    actions.push(Action::Terminate { status: TerminateStatus::Success });
    actions
}

fn push_scrolls(actions: &mut Vec<Action>, offset: &mut u32, target: u32, page: u32) {
    while *offset < target {
        actions.push(Action::Scroll { direction: crate::gui_sim::ScrollDirection::Down });
        *offset += page;
    }
    while *offset > target {
        actions.push(Action::Scroll { direction: crate::gui_sim::ScrollDirection::Up });
        *offset = offset.saturating_sub(page);
    }
}

/// Builds the full TaskQuery for a sampled path.
pub fn task_from_path(
    graph: &AppGraph,
    path: &SampledPath,
    task_id: String,
    style: InstructionStyle,
) -> TaskQuery {
    let goal = Goal {
        slot_constraints: path.slot_bindings.iter().cloned().collect(),
        goal_screen: Some(path.screens.last().unwrap().clone()),
    };
    TaskQuery {
        task_id,
        instruction: synthesize_instruction(graph, path, style),
        app_names: vec![path.app_name.clone()],
        goal,
        oracle_actions: oracle_actions_for_path(graph, path),
        difficulty: path.screens.len() as u32,
        guidance: None,
    }
}

/// Replays the oracle actions from reset; failures are reported, not thrown.
pub fn validate_task(task: &TaskQuery, env: &mut Env) -> ValidationReport {
    let mut invalid_steps = Vec::new();
    if env.reset(&task.app_names).is_err() {
        return ValidationReport { success: false, invalid_steps };
    }
    for (i, action) in task.oracle_actions.iter().enumerate() {
        match env.step(action) {
            Ok((_, report)) => {
                if report.invalid_target {
                    invalid_steps.push(i);
                }
            }
            Err(_) => {
                invalid_steps.push(i);
                break;
            }
        }
    }
    let success = goal_satisfied(&env.snapshot(), &task.goal);
    ValidationReport { success, invalid_steps }
}

/// Generates `n` validated tasks across the installed apps; invalid
/// syntheses are resampled, up to 10·n consecutive failures.
pub fn generate_pool(
    world: &Arc<World>,
    n: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<TaskQuery>, TaskGenError> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<Arc<AppGraph>> = world.apps().cloned().collect();
    let mut pool = Vec::with_capacity(n);
    let mut consecutive_failures = 0u32;
    let limit = (10 * n) as u32;
    while pool.len() < n {
        let graph = &graphs[rng.gen_range(0..graphs.len())];
        let path = sample_path(graph, &mut rng, max_len);
        let style = if rng.gen_bool(0.5) { InstructionStyle::Explicit } else { InstructionStyle::Natural };
        let task_id = format!("task-{:04}", pool.len());
        let task = task_from_path(graph, &path, task_id, style);
        let mut env = Env::new(world.clone());
        let report = validate_task(&task, &mut env);
        if report.success && report.invalid_steps.is_empty() {
            consecutive_failures = 0;
            pool.push(task);
        } else {
            consecutive_failures += 1;
            if consecutive_failures >= limit {
                return Err(TaskGenError::Exhaustion(consecutive_failures));
            }
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gui_sim::load_app_graph;
    use std::collections::HashSet;

    fn takeout_graph() -> AppGraph {
        load_app_graph(fixtures::TAKEOUT_APP).unwrap()
    }

    /// Brute-force DFS enumeration of all directed paths from home.
    fn all_paths(graph: &AppGraph, max_len: usize) -> HashSet<Vec<String>> {
        let mut out = HashSet::new();
        let mut stack = vec![vec![graph.home_screen.clone()]];
        while let Some(path) = stack.pop() {
            out.insert(path.clone());
            if path.len() == max_len {
                continue;
            }
            let last = path.last().unwrap();
            for (from, to) in &graph.edges {
                if from == last {
                    let mut next = path.clone();
                    next.push(to.clone());
                    stack.push(next);
                }
            }
        }
        out
    }

    #[test]
    fn single_screen_graph_gives_length_one_path() {
        let graph = load_app_graph(fixtures::CLOCK_APP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = sample_path(&graph, &mut rng, 4);
        assert_eq!(path.screens, vec!["home"]);
    }

    #[test]
    fn sampled_paths_are_members_of_dfs_enumeration() {
        let graph = takeout_graph();
        let legal = all_paths(&graph, 4);
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let path = sample_path(&graph, &mut rng, 4);
            assert!(legal.contains(&path.screens), "illegal path {:?}", path.screens);
        }
    }

    #[test]
    fn seed_7_path_is_stable_and_legal() {
        let graph = takeout_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = sample_path(&graph, &mut rng, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = sample_path(&graph, &mut rng, 4);
        assert_eq!(a, b);
        assert!(all_paths(&graph, 4).contains(&a.screens));
    }

    #[test]
    fn explicit_instruction_roundtrips_constraints() {
        let graph = takeout_graph();
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let path = sample_path(&graph, &mut rng, 4);
            let text = synthesize_instruction(&graph, &path, InstructionStyle::Explicit);
            let parsed = parse_instruction_constraints(&text);
            let expected: BTreeMap<String, String> = path.slot_bindings.iter().cloned().collect();
            assert_eq!(parsed, expected, "instruction: {text}");
        }
    }

    #[test]
    fn explicit_instruction_mentions_screens_and_values() {
        let graph = takeout_graph();
        let path = SampledPath {
            app_name: "TakeoutApp".into(),
            screens: vec!["home".into(), "menu".into(), "cart".into()],
            descriptions: vec!["a".into(), "b".into(), "c".into()],
            slot_bindings: vec![("search".into(), "pizza".into())],
        };
        let text = synthesize_instruction(&graph, &path, InstructionStyle::Explicit);
        assert_eq!(
            text,
            "Open TakeoutApp, then go to menu, then set search to 'pizza', then go to cart, finishing on cart."
        );
        let natural = synthesize_instruction(&graph, &path, InstructionStyle::Natural);
        assert_eq!(natural, "In TakeoutApp, I want search set as 'pizza', ending at the cart screen.");
        assert_eq!(
            parse_instruction_constraints(&natural),
            path.slot_bindings.iter().cloned().collect()
        );
    }

    #[test]
    fn empty_binding_single_screen_instruction_mentions_only_app() {
        let graph = load_app_graph(fixtures::CLOCK_APP).unwrap();
        let path = SampledPath {
            app_name: "ClockApp".into(),
            screens: vec!["home".into()],
            descriptions: vec!["d".into()],
            slot_bindings: vec![],
        };
        let text = synthesize_instruction(&graph, &path, InstructionStyle::Explicit);
        assert_eq!(text, "Open ClockApp, finishing on home.");
    }

    #[test]
    fn oracle_replay_validates_fixture_task() {
        let world = fixtures::takeout_world();
        let graph = takeout_graph();
        let path = SampledPath {
            app_name: "TakeoutApp".into(),
            screens: vec!["home".into(), "menu".into(), "cart".into(), "payment".into()],
            descriptions: vec![String::new(); 4],
            slot_bindings: vec![("promo".into(), "true".into()), ("tip".into(), "5".into())],
        };
        let task = task_from_path(&graph, &path, "t".into(), InstructionStyle::Explicit);
        let mut env = Env::new(world);
        let report = validate_task(&task, &mut env);
        assert!(report.success);
        assert!(report.invalid_steps.is_empty());
    }

    #[test]
    fn mutated_task_reports_offending_step() {
        let world = fixtures::takeout_world();
        let graph = takeout_graph();
        let path = SampledPath {
            app_name: "TakeoutApp".into(),
            screens: vec!["home".into(), "menu".into()],
            descriptions: vec![String::new(); 2],
            slot_bindings: vec![("search".into(), "pizza".into())],
        };
        let mut task = task_from_path(&graph, &path, "t".into(), InstructionStyle::Explicit);
        // Point the slot edit at a widget that does not exist.
        for (i, a) in task.oracle_actions.iter_mut().enumerate() {
            if let Action::Type { widget_id, .. } = a {
                *widget_id = "removed_widget".into();
                let mut env = Env::new(world.clone());
                let report = validate_task(&task, &mut env);
                assert!(!report.success);
                assert_eq!(report.invalid_steps, vec![i]);
                return;
            }
        }
        panic!("expected a Type action in the oracle sequence");
    }

    #[test]
    fn empty_oracle_with_trivial_goal_validates() {
        let world = fixtures::takeout_world();
        let task = TaskQuery {
            task_id: "trivial".into(),
            instruction: "do nothing".into(),
            app_names: vec!["TakeoutApp".into()],
            goal: Goal { slot_constraints: BTreeMap::new(), goal_screen: None },
            oracle_actions: vec![],
            difficulty: 1,
            guidance: None,
        };
        let mut env = Env::new(world);
        let report = validate_task(&task, &mut env);
        assert!(report.success);
    }

    #[test]
    fn pool_is_deterministic_and_all_tasks_validate() {
        let world = fixtures::fixture_world();
        let a = generate_pool(&world, 50, 3, 4).unwrap();
        let b = generate_pool(&world, 50, 3, 4).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let ids: HashSet<&str> = a.iter().map(|t| t.task_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
        for task in &a {
            let mut env = Env::new(world.clone());
            let report = validate_task(task, &mut env);
            assert!(report.success, "task {} fails validation", task.task_id);
        }
    }

    #[test]
    fn intent_extraction_understands_generated_phrases() {
        let intent = extract_action_intent("the goal needs the cart, so I click `to_cart` now").unwrap();
        assert_eq!(intent.variant, "Click");
        assert_eq!(intent.target_widget.as_deref(), Some("to_cart"));

        let intent = extract_action_intent("enter 'pizza' into `search_box`").unwrap();
        assert_eq!(intent.variant, "Type");
        assert_eq!(intent.value.as_deref(), Some("pizza"));

        assert!(extract_action_intent("nothing actionable here").is_none());
    }
}
