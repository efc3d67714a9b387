//! Deterministic simulated GUI environment.
//!
//! Apps are described by directed acyclic graphs of screens. Screens carry
//! widgets: navigation widgets move between screens, editing widgets write
//! slot values. The environment executes actions, produces structured
//! observations (a text stand-in for screenshots) and exposes ground-truth
//! state so oracle critics can verify everything exactly.

mod env;
mod graph;

pub use env::{
    describe_effect, goal_satisfied, Action, Env, EnvError, EnvSnapshot, EnvState, Goal,
    Observation, ScrollDirection, TerminateStatus, TransitionReport, VisibleWidget, World,
    NAV_STACK_MAX,
};
pub use graph::{load_app_graph, AppGraph, GraphError, Screen, Widget, WidgetKind};
