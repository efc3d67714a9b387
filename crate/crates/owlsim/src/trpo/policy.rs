//! Toy differentiable policy: linear softmax over enumerable candidate
//! actions with hand-crafted sparse indicator features. Every RL quantity
//! downstream (ratios, gradients) is exactly checkable against this model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gui_sim::{Action, Observation, ScrollDirection, TerminateStatus, WidgetKind};
use crate::taskgen::extract_quoted;

pub type SparseFeatures = Vec<(usize, f64)>;

/// Everything the policy conditions on for one decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyContext {
    pub instruction: String,
    pub observation: Observation,
    pub history_len: usize,
    pub app_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub temperature: f64,
}

pub fn fnv1a64(data: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in data.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic enumeration of the actions available in a context.
pub fn enumerate_candidates(ctx: &PolicyContext) -> Vec<Action> {
    let obs = &ctx.observation;
    let mut out = Vec::new();
    if obs.app.is_some() {
        let values = extract_quoted(&ctx.instruction);
        for w in &obs.visible_widgets {
            out.push(Action::Click { widget_id: w.widget_id.clone() });
            if w.kind == WidgetKind::Textfield {
                for v in &values {
                    out.push(Action::Type { widget_id: w.widget_id.clone(), text: v.clone() });
                }
            }
        }
        let (offset, max) = obs.scroll_position;
        if offset < max {
            out.push(Action::Scroll { direction: ScrollDirection::Down });
        }
        if offset > 0 {
            out.push(Action::Scroll { direction: ScrollDirection::Up });
        }
        out.push(Action::Back);
    }
    for app in &ctx.app_names {
        out.push(Action::OpenApp { app_name: app.clone() });
    }
    out.push(Action::Wait);
    out.push(Action::Terminate { status: TerminateStatus::Success });
    out
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric() && c != '_' && c != ':')
        .filter(|w| w.len() >= 4)
        .map(|w| w.to_string())
        .collect()
}

/// Fuzzy mention test: any long word of `label` overlaps any long word of
/// `instruction` as a substring in either direction.
fn mentioned(label: &str, instruction: &str) -> bool {
    let label_words = words(label);
    let instr_words = words(instruction);
    label_words
        .iter()
        .any(|lw| instr_words.iter().any(|iw| lw.contains(iw.as_str()) || iw.contains(lw.as_str())))
}

/// Sparse indicator features for (context, action), hashed into `dim` buckets.
pub fn features(ctx: &PolicyContext, action: &Action, dim: usize) -> SparseFeatures {
    let mut keys: Vec<String> = Vec::new();
    let variant = action.variant_name();
    let screen = &ctx.observation.screen_id;
    keys.push(format!("act={variant}"));
    keys.push(format!("screen={screen}|act={variant}"));
    keys.push(format!("histlen={}|act={variant}", ctx.history_len.min(3)));
    if let Some(widget_id) = action.target_widget() {
        keys.push(format!("widget={widget_id}|act={variant}"));
        let label = ctx
            .observation
            .visible_widgets
            .iter()
            .find(|w| w.widget_id == widget_id)
            .map(|w| w.label.clone())
            .unwrap_or_default();
        let goal_mention = mentioned(&label, &ctx.instruction);
        match action {
            Action::Type { text, .. } => {
                let quoted = format!("'{text}'");
                keys.push(
                    if ctx.instruction.contains(&quoted) { "type_goal_value" } else { "type_nongoal_value" }
                        .to_string(),
                );
                keys.push(
                    if goal_mention { "type_goal_slot" } else { "type_nongoal_slot" }.to_string(),
                );
            }
            Action::Click { .. } => {
                keys.push(
                    if goal_mention { "click_goal_mention" } else { "click_no_mention" }.to_string(),
                );
            }
            _ => {}
        }
    }
    if let Action::OpenApp { app_name } = action {
        keys.push(
            if ctx.instruction.contains(app_name.as_str()) { "open_goal_app" } else { "open_other_app" }
                .to_string(),
        );
    }
    if matches!(action, Action::Terminate { .. }) {
        let on_goal_screen = ctx.instruction.contains(&format!("finishing on {screen}"))
            || ctx.instruction.contains(&format!("ending at the {screen} screen"));
        keys.push(if on_goal_screen { "term_goal_screen" } else { "term_wrong_screen" }.to_string());
        let values = extract_quoted(&ctx.instruction);
        let all_visible = !values.is_empty()
            && values.iter().all(|v| ctx.observation.serialized.contains(&format!("'{v}'")));
        if all_visible {
            keys.push("term_values_visible".to_string());
        }
    }

    let mut out: SparseFeatures = Vec::with_capacity(keys.len());
    for key in keys {
        let idx = (fnv1a64(&key) % dim as u64) as usize;
        match out.iter_mut().find(|(i, _)| *i == idx) {
            Some((_, v)) => *v += 1.0,
            None => out.push((idx, 1.0)),
        }
    }
    out.sort_unstable_by_key(|(i, _)| *i);
    out
}

pub fn dot(theta: &[f64], feats: &SparseFeatures) -> f64 {
    feats.iter().map(|(i, v)| theta[*i] * v).sum()
}

impl PolicyParams {
    pub fn new(dim: usize, temperature: f64) -> Self {
        PolicyParams { theta: vec![0.0; dim], temperature }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Candidate actions with their log-probabilities, in enumeration order.
    pub fn distribution(&self, ctx: &PolicyContext) -> (Vec<Action>, Vec<f64>) {
        let candidates = enumerate_candidates(ctx);
        let logits: Vec<f64> = candidates
            .iter()
            .map(|a| dot(&self.theta, &features(ctx, a, self.dim())) / self.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_probs = logits.iter().map(|l| l - log_z).collect();
        (candidates, log_probs)
    }

    /// Samples an action; returns (action, log-probability).
    pub fn sample(&self, ctx: &PolicyContext, rng: &mut ChaCha8Rng) -> (Action, f64) {
        let (candidates, log_probs) = self.distribution(ctx);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (action, lp) in candidates.iter().zip(&log_probs) {
            acc += lp.exp();
            if draw < acc {
                return (action.clone(), *lp);
            }
        }
        let last = candidates.len() - 1;
        (candidates[last].clone(), log_probs[last])
    }

    /// Log-probability of a specific action, if it is a candidate.
    pub fn log_prob(&self, ctx: &PolicyContext, action: &Action) -> Option<f64> {
        let (candidates, log_probs) = self.distribution(ctx);
        candidates.iter().position(|a| a == action).map(|i| log_probs[i])
    }

    /// Exact gradient of log pi(action|ctx) w.r.t. theta, accumulated into `out`.
    pub fn accumulate_grad_log_prob(
        &self,
        ctx: &PolicyContext,
        action: &Action,
        scale: f64,
        out: &mut [f64],
    ) {
        let (candidates, log_probs) = self.distribution(ctx);
        let chosen = features(ctx, action, self.dim());
        for (i, v) in &chosen {
            out[*i] += scale * v / self.temperature;
        }
        for (cand, lp) in candidates.iter().zip(&log_probs) {
            let p = lp.exp();
            for (i, v) in features(ctx, cand, self.dim()) {
                out[i] -= scale * p * v / self.temperature;
            }
        }
    }
}
