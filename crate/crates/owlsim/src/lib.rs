//! Desk-scale testbed for GUI-agent training machinery: a deterministic
//! simulated GUI environment, DAG-based task generation, a multi-agent
//! execution loop, trajectory judgment, a self-evolving data pipeline, and a
//! trajectory-level RL trainer over a toy differentiable policy.

pub mod agents;
pub mod cli;
pub mod fixtures;
pub mod gui_sim;
pub mod judgment;
pub mod pipeline;
pub mod taskgen;
pub mod trajectory;
pub mod trpo;
