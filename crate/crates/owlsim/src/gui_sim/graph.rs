//! App-graph definitions: screens as DAG nodes, navigation widgets as edges.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed app-graph document: {0}")]
    Schema(String),
    #[error("navigation edges contain a cycle involving screen '{0}'")]
    Cycle(String),
    #[error("dangling reference: {0}")]
    DanglingRef(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    Textfield,
    Checkbox,
    ListItem,
    ScrollRegion,
}

impl WidgetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WidgetKind::Button => "button",
            WidgetKind::Textfield => "textfield",
            WidgetKind::Checkbox => "checkbox",
            WidgetKind::ListItem => "list_item",
            WidgetKind::ScrollRegion => "scroll_region",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Widget {
    pub widget_id: String,
    pub kind: WidgetKind,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_screen: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_key: Option<String>,
    #[serde(default)]
    pub visible_from_scroll: u32,
}

impl Widget {
    pub fn is_navigation(&self) -> bool {
        self.target_screen.is_some()
    }

    pub fn is_editing(&self) -> bool {
        self.slot_key.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Screen {
    pub screen_id: String,
    pub description: String,
    pub viewport_size: u32,
    pub widgets: Vec<Widget>,
}

impl Screen {
    pub fn widget(&self, widget_id: &str) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.widget_id == widget_id)
    }

    /// Largest scroll offset the viewport can reach on this screen.
    pub fn max_scroll_offset(&self) -> u32 {
        let max_vfs = self.widgets.iter().map(|w| w.visible_from_scroll).max().unwrap_or(0);
        (max_vfs / self.viewport_size) * self.viewport_size
    }

    /// Scroll offset at which `widget` is inside the viewport window.
    pub fn page_offset_for(&self, widget: &Widget) -> u32 {
        (widget.visible_from_scroll / self.viewport_size) * self.viewport_size
    }
}

/// A validated app: screens, the home screen, and the navigation edge set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppGraph {
    pub app_name: String,
    pub home_screen: String,
    pub screens: Vec<Screen>,
    #[serde(skip)]
    pub edges: BTreeSet<(String, String)>,
}

impl AppGraph {
    pub fn screen(&self, screen_id: &str) -> Option<&Screen> {
        self.screens.iter().find(|s| s.screen_id == screen_id)
    }

    /// All slot keys editable anywhere in the app, in screen/widget order.
    pub fn slot_keys(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for screen in &self.screens {
            for widget in &screen.widgets {
                if let Some(key) = &widget.slot_key {
                    if seen.insert(key.clone()) {
                        out.push(key.clone());
                    }
                }
            }
        }
        out
    }

    /// Shortest forward navigation distance between two screens, if any path exists.
    pub fn nav_distance(&self, from: &str, to: &str) -> Option<u32> {
        if from == to {
            return Some(0);
        }
        let mut dist: HashMap<&str, u32> = HashMap::new();
        dist.insert(from, 0);
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(from);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur];
            for (a, b) in &self.edges {
                if a == cur && !dist.contains_key(b.as_str()) {
                    if b == to {
                        return Some(d + 1);
                    }
                    dist.insert(b, d + 1);
                    queue.push_back(b);
                }
            }
        }
        None
    }
}

/// Parses and validates a JSON app-graph document.
pub fn load_app_graph(definition: &str) -> Result<AppGraph, GraphError> {
    let mut graph: AppGraph =
        serde_json::from_str(definition).map_err(|e| GraphError::Schema(e.to_string()))?;
    validate(&mut graph)?;
    Ok(graph)
}

fn validate(graph: &mut AppGraph) -> Result<(), GraphError> {
    if graph.app_name.is_empty() {
        return Err(GraphError::Schema("app_name must be non-empty".into()));
    }
    let mut screen_ids = HashSet::new();
    for screen in &graph.screens {
        if !screen_ids.insert(screen.screen_id.clone()) {
            return Err(GraphError::Schema(format!(
                "duplicate screen_id '{}'",
                screen.screen_id
            )));
        }
        if screen.description.is_empty() {
            return Err(GraphError::Schema(format!(
                "screen '{}' has an empty description",
                screen.screen_id
            )));
        }
        if screen.viewport_size == 0 {
            return Err(GraphError::Schema(format!(
                "screen '{}' has viewport_size 0",
                screen.screen_id
            )));
        }
        let mut widget_ids = HashSet::new();
        for widget in &screen.widgets {
            if !widget_ids.insert(widget.widget_id.clone()) {
                return Err(GraphError::Schema(format!(
                    "duplicate widget_id '{}' on screen '{}'",
                    widget.widget_id, screen.screen_id
                )));
            }
            if widget.target_screen.is_some() && widget.slot_key.is_some() {
                return Err(GraphError::Schema(format!(
                    "widget '{}' has both target_screen and slot_key",
                    widget.widget_id
                )));
            }
            // Guarantees the whole screen is coverable within
            // ceil(|widgets|/viewport_size) - 1 scrolls.
            if widget.visible_from_scroll as usize >= screen.widgets.len() {
                return Err(GraphError::Schema(format!(
                    "widget '{}' has visible_from_scroll {} beyond screen size {}",
                    widget.widget_id,
                    widget.visible_from_scroll,
                    screen.widgets.len()
                )));
            }
        }
    }
    if !screen_ids.contains(&graph.home_screen) {
        return Err(GraphError::DanglingRef(format!(
            "home_screen '{}' does not exist",
            graph.home_screen
        )));
    }

    let mut edges = BTreeSet::new();
    for screen in &graph.screens {
        for widget in &screen.widgets {
            if let Some(target) = &widget.target_screen {
                if !screen_ids.contains(target) {
                    return Err(GraphError::DanglingRef(format!(
                        "widget '{}' targets unknown screen '{}'",
                        widget.widget_id, target
                    )));
                }
                edges.insert((screen.screen_id.clone(), target.clone()));
            }
        }
    }
    graph.edges = edges;
    check_acyclic(graph)?;
    Ok(())
}

fn check_acyclic(graph: &AppGraph) -> Result<(), GraphError> {
    // Kahn's algorithm; anything left over sits on a cycle.
    let mut indegree: HashMap<&str, usize> =
        graph.screens.iter().map(|s| (s.screen_id.as_str(), 0)).collect();
    for (_, to) in &graph.edges {
        *indegree.get_mut(to.as_str()).unwrap() += 1;
    }
    let mut queue: Vec<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(s, _)| *s)
        .collect();
    queue.sort_unstable();
    let mut removed = 0usize;
    while let Some(node) = queue.pop() {
        removed += 1;
        for (from, to) in &graph.edges {
            if from == node {
                let d = indegree.get_mut(to.as_str()).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push(to);
                }
            }
        }
    }
    if removed != graph.screens.len() {
        let mut remaining: Vec<&str> = indegree
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(s, _)| *s)
            .collect();
        remaining.sort_unstable();
        return Err(GraphError::Cycle(remaining.first().unwrap_or(&"?").to_string()));
    }
    Ok(())
}
