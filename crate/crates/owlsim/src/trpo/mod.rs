//! Trajectory-level policy optimization: toy policy, rewards, normalized
//! advantages, task-indexed replay, clipped surrogate loss with exact
//! gradients, and the trainer modes.

pub mod policy;
pub mod train;

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gui_sim::Action;
use crate::judgment::JudgedTrajectory;
use crate::trajectory::Trajectory;

pub use policy::{enumerate_candidates, features, fnv1a64, PolicyContext, PolicyParams};
pub use train::{
    render_metrics_csv, train, IterationMetrics, TrainConfig, TrainMode, TrainResult,
    METRICS_HEADER,
};

#[derive(Debug, Error)]
pub enum TrpoError {
    #[error("degenerate batch: no step instances")]
    DegenerateBatch,
}

/// Format penalty for malformed emissions; applied once per trajectory by
/// default, per malformed step when `per_step` is set.
pub const FORMAT_PENALTY: f64 = -0.5;

/// R = accuracy + format. Accuracy is 1 for a judged-successful trajectory.
pub fn compute_reward(traj: &Trajectory, success: bool) -> f64 {
    compute_reward_with(traj, success, false)
}

pub fn compute_reward_with(traj: &Trajectory, success: bool, per_step: bool) -> f64 {
    let accuracy = if success { 1.0 } else { 0.0 };
    let format = if per_step {
        FORMAT_PENALTY * traj.count_malformed() as f64
    } else if traj.any_malformed() {
        FORMAT_PENALTY
    } else {
        0.0
    };
    accuracy + format
}

/// Running reward statistics (Welford); advantages are always computed
/// against the pre-update statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvantageStats {
    mean: f64,
    m2: f64,
    count: u64,
    eps_adv: f64,
}

impl AdvantageStats {
    pub fn new(eps_adv: f64) -> Self {
        assert!(eps_adv > 0.0);
        AdvantageStats { mean: 0.0, m2: 0.0, count: 0, eps_adv }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation of the rewards absorbed so far.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Normalized advantage of `r` against the current statistics, after
    /// which the statistics absorb `r`.
    pub fn advantage_and_update(&mut self, r: f64) -> f64 {
        let a = self.advantage(r);
        self.update(r);
        a
    }

    pub fn advantage(&self, r: f64) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (r - self.mean) / (self.std() + self.eps_adv)
        }
    }

    pub fn update(&mut self, r: f64) {
        self.count += 1;
        let delta = r - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (r - self.mean);
    }
}

/// Task-indexed FIFO store of judged-successful trajectories.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    store: BTreeMap<String, VecDeque<JudgedTrajectory>>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        ReplayBuffer { store: BTreeMap::new(), capacity }
    }

    /// Ignores non-successful trajectories, preserving buffer purity.
    pub fn offer(&mut self, judged: &JudgedTrajectory) {
        if !judged.correct() {
            return;
        }
        let slot = self.store.entry(judged.traj.task_id.clone()).or_default();
        if slot.len() >= self.capacity {
            slot.pop_front();
        }
        slot.push_back(judged.clone());
    }

    pub fn successes_for(&self, task_id: &str) -> usize {
        self.store.get(task_id).map(VecDeque::len).unwrap_or(0)
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &JudgedTrajectory> {
        self.store.values().flatten()
    }
}

/// Replaces one member of an all-failure group with a buffered success for
/// the same task; the buffer first ingests the group's own successes.
/// Returns whether an injection happened.
pub fn inject_replay(
    group: &mut [JudgedTrajectory],
    buffer: &mut ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> bool {
    assert!(!group.is_empty());
    let task_id = group[0].traj.task_id.clone();
    debug_assert!(group.iter().all(|j| j.traj.task_id == task_id));
    for judged in group.iter() {
        buffer.offer(judged);
    }
    if group.iter().any(|j| j.correct()) {
        return false;
    }
    let available = buffer.successes_for(&task_id);
    if available == 0 {
        return false;
    }
    let victim = rng.gen_range(0..group.len());
    let pick = rng.gen_range(0..available);
    let replacement = buffer.store[&task_id][pick].clone();
    group[victim] = replacement;
    true
}

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
pub fn clipped_term(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * advantage).min(clipped * advantage)
}

/// One step of a segmented trajectory; every instance from the same
/// trajectory carries the same advantage and the same S_i.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepInstance {
    pub ctx: PolicyContext,
    pub action: Action,
    pub old_log_prob: f64,
    pub traj_id: String,
    pub s_i: usize,
    pub advantage: f64,
}

/// Segments a trajectory into step instances, reconstructing each step's
/// policy context from the recorded observation. `old_log_prob` comes from
/// the recorded sampling metadata when present, else from `reference`.
pub fn segment_trajectory(
    traj: &Trajectory,
    instruction: &str,
    app_names: &[String],
    advantage: f64,
    reference: &PolicyParams,
) -> Vec<StepInstance> {
    let s_i = traj.steps.len().max(1);
    traj.steps
        .iter()
        .filter_map(|step| {
            let history_len =
                step.policy_meta.as_ref().map(|m| m.history_len).unwrap_or(step.t as usize);
            let ctx = PolicyContext {
                instruction: instruction.to_string(),
                observation: step.obs_before.clone(),
                history_len,
                app_names: app_names.to_vec(),
            };
            let old_log_prob = match &step.policy_meta {
                Some(m) => m.chosen_log_prob,
                None => reference.log_prob(&ctx, &step.action.action)?,
            };
            Some(StepInstance {
                ctx,
                action: step.action.action.clone(),
                old_log_prob,
                traj_id: traj.traj_id.clone(),
                s_i,
                advantage,
            })
        })
        .collect()
}

/// Loss and exact gradient of the clipped surrogate over a batch:
/// -(1/N) * sum over instances of (1/S_i) * min(r A, clip(r) A).
pub fn trpo_loss(
    batch: &[StepInstance],
    policy: &PolicyParams,
    eps_clip: f64,
) -> Result<(f64, Vec<f64>), TrpoError> {
    if batch.is_empty() {
        return Err(TrpoError::DegenerateBatch);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.dim()];
    for inst in batch {
        let lp_new = match policy.log_prob(&inst.ctx, &inst.action) {
            Some(lp) => lp,
            None => continue,
        };
        let ratio = (lp_new - inst.old_log_prob).exp();
        let term = clipped_term(ratio, inst.advantage, eps_clip);
        let scale = 1.0 / inst.s_i as f64;
        loss -= scale * term / n;
        // The clipped branch has zero derivative in theta; the unclipped
        // branch contributes A * r * grad(log pi).
        let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
        if ratio * inst.advantage <= clipped * inst.advantage {
            policy.accumulate_grad_log_prob(
                &inst.ctx,
                &inst.action,
                -scale * inst.advantage * ratio / n,
                &mut grad,
            );
        }
    }
    Ok((loss, grad))
}

/// Weighted log-likelihood step over (context, action, weight) triples; the
/// supervised consumer of pipeline datasets.
pub fn train_on_dataset(policy: &mut PolicyParams, data: &[(PolicyContext, Action, f64)], lr: f64) {
    let total: f64 = data.iter().map(|(_, _, w)| w).sum();
    if total <= 0.0 {
        return;
    }
    let mut grad = vec![0.0; policy.dim()];
    for (ctx, action, weight) in data {
        if policy.log_prob(ctx, action).is_none() {
            continue;
        }
        policy.accumulate_grad_log_prob(ctx, action, weight / total, &mut grad);
    }
    for (t, g) in policy.theta.iter_mut().zip(&grad) {
        *t += lr * g;
    }
}

pub const FEATURE_MAP_VERSION: &str = "fmap-v1";

/// Serializable policy checkpoint with the feature-map version tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub feature_map_version: String,
    pub temperature: f64,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn of(policy: &PolicyParams) -> Self {
        Checkpoint {
            feature_map_version: FEATURE_MAP_VERSION.to_string(),
            temperature: policy.temperature,
            theta: policy.theta.clone(),
        }
    }

    pub fn into_policy(self) -> anyhow::Result<PolicyParams> {
        anyhow::ensure!(
            self.feature_map_version == FEATURE_MAP_VERSION,
            "checkpoint feature map {} does not match {}",
            self.feature_map_version,
            FEATURE_MAP_VERSION
        );
        Ok(PolicyParams { theta: self.theta, temperature: self.temperature })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gui_sim::Env;
    use crate::judgment::{judge_trajectory, JudgedTrajectory};
    use crate::taskgen::generate_pool;
    use crate::trajectory::TrajMode;
    use rand_chacha::rand_core::SeedableRng;

    fn judged(seed: u64, correct_only: bool) -> JudgedTrajectory {
        use crate::agents::{run_episode, EpisodeConfig, KnowledgeTable, RoleBackends};
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 1, seed, 3).unwrap();
        let task = &pool[0];
        let mut env = Env::new(world.clone());
        let mut backends = RoleBackends::oracle(task, world.clone());
        let traj = run_episode(task, &mut env, &mut backends, &KnowledgeTable::default(), &EpisodeConfig::default(), "r0");
        let verdict = judge_trajectory(&world, task, &traj);
        let j = JudgedTrajectory { traj, verdict };
        if correct_only {
            assert!(j.correct());
        }
        j
    }

    #[test]
    fn reward_arithmetic_covers_all_three_cases() {
        let mut j = judged(1, true);
        assert_eq!(compute_reward(&j.traj, true), 1.0);
        // Flag one step malformed.
        j.traj.steps[0].transition.malformed = true;
        assert_eq!(compute_reward(&j.traj, false), -0.5);
        assert_eq!(compute_reward(&j.traj, true), 0.5);
        // Per-step accumulation doubles the penalty with two malformed steps.
        j.traj.steps[1].transition.malformed = true;
        assert_eq!(compute_reward_with(&j.traj, true, true), 0.0);
        assert_eq!(compute_reward(&j.traj, true), 0.5);
    }

    #[test]
    fn advantage_sign_and_worked_value() {
        let mut stats = AdvantageStats::new(1e-4);
        assert_eq!(stats.advantage_and_update(0.5), 0.0);

        let mut stats = AdvantageStats::new(1e-4);
        stats.update(1.0);
        stats.update(0.0);
        assert!((stats.mean() - 0.5).abs() < 1e-15);
        assert!((stats.std() - 0.5).abs() < 1e-15);
        let a = stats.advantage(1.0);
        let expected = 0.5 / (0.5 + 1e-4);
        assert!((a - expected).abs() < 1e-9);
        assert!(a > 0.0);
        assert!(stats.advantage(0.0) < 0.0);
        assert_eq!(stats.advantage(0.5), 0.0);
    }

    #[test]
    fn replay_buffer_is_fifo_and_success_only() {
        let mut buffer = ReplayBuffer::new(2);
        for i in 0..4u64 {
            let mut j = judged(1, true);
            j.traj.traj_id = format!("s{i}");
            buffer.offer(&j);
        }
        let task_id = judged(1, true).traj.task_id;
        assert_eq!(buffer.successes_for(&task_id), 2);
        let ids: Vec<&str> =
            buffer.iter_all().map(|j| j.traj.traj_id.as_str()).collect();
        assert_eq!(ids, vec!["s2", "s3"]);

        let mut failure = judged(1, true);
        failure.verdict.consensus = crate::judgment::ChannelVerdict::Incorrect;
        buffer.offer(&failure);
        assert_eq!(buffer.successes_for(&task_id), 2);
        assert!(buffer.iter_all().all(|j| j.correct()));
    }

    #[test]
    fn inject_replay_fills_all_failure_groups_only() {
        let success = judged(1, true);
        let mut failure = success.clone();
        failure.verdict.consensus = crate::judgment::ChannelVerdict::Incorrect;

        let mut buffer = ReplayBuffer::new(4);
        buffer.offer(&success);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let mut group = vec![failure.clone(), failure.clone(), failure.clone()];
        assert!(inject_replay(&mut group, &mut buffer, &mut rng));
        assert_eq!(group.iter().filter(|j| j.correct()).count(), 1);

        // A group with a pre-existing success is untouched.
        let mut group = vec![failure.clone(), success.clone()];
        let before = serde_json::to_string(&group).unwrap();
        assert!(!inject_replay(&mut group, &mut buffer, &mut rng));
        assert_eq!(serde_json::to_string(&group).unwrap(), before);

        // Empty buffer: all-failure group is untouched.
        let mut empty = ReplayBuffer::new(4);
        let mut group = vec![failure.clone()];
        let before = serde_json::to_string(&group).unwrap();
        assert!(!inject_replay(&mut group, &mut empty, &mut rng));
        assert_eq!(serde_json::to_string(&group).unwrap(), before);
    }

    #[test]
    fn clipped_term_worked_examples() {
        assert_eq!(clipped_term(1.0, 2.0, 0.2), 2.0);
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
    }

    fn fixture_batch(seed: u64, policy: &PolicyParams) -> Vec<StepInstance> {
        use crate::agents::{run_episode_e2e, LearnedDriver};
        let world = fixtures::fixture_world();
        let pool = generate_pool(&world, 2, seed, 3).unwrap();
        let mut out = Vec::new();
        for (i, task) in pool.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let mut driver = LearnedDriver { policy, rng: &mut rng };
            let mut env = Env::new(world.clone());
            let traj = run_episode_e2e(task, &mut env, &mut driver, 3, 8, &format!("e{i}"));
            assert_eq!(traj.mode, TrajMode::E2E);
            let adv = if i % 2 == 0 { 0.75 } else { -0.5 };
            out.extend(segment_trajectory(&traj, &task.instruction, &world.app_names(), adv, policy));
        }
        out
    }

    #[test]
    fn identity_ratio_loss_matches_direct_sum() {
        let policy = PolicyParams::new(256, 1.0);
        let batch = fixture_batch(3, &policy);
        let (loss, _) = trpo_loss(&batch, &policy, 0.2).unwrap();
        let n = batch.len() as f64;
        let direct: f64 =
            batch.iter().map(|i| i.advantage / i.s_i as f64).sum::<f64>() * (-1.0 / n);
        assert!((loss - direct).abs() < 1e-12, "{loss} vs {direct}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut old = PolicyParams::new(64, 1.0);
        old.theta.iter_mut().enumerate().for_each(|(i, t)| *t = ((i % 5) as f64 - 2.0) * 0.05);
        let batch = fixture_batch(7, &old);
        let mut policy = old.clone();
        policy.theta.iter_mut().enumerate().for_each(|(i, t)| *t += ((i % 3) as f64 - 1.0) * 0.03);
        let (_, grad) = trpo_loss(&batch, &policy, 0.2).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 17, 40, 63] {
            let mut plus = policy.clone();
            plus.theta[idx] += h;
            let mut minus = policy.clone();
            minus.theta[idx] -= h;
            let (lp, _) = trpo_loss(&batch, &plus, 0.2).unwrap();
            let (lm, _) = trpo_loss(&batch, &minus, 0.2).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-4,
                "idx {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn degenerate_batch_is_an_error() {
        let policy = PolicyParams::new(16, 1.0);
        assert!(matches!(trpo_loss(&[], &policy, 0.2), Err(TrpoError::DegenerateBatch)));
    }

    #[test]
    fn checkpoint_roundtrips_and_rejects_wrong_version() {
        let mut policy = PolicyParams::new(8, 0.7);
        policy.theta[3] = 1.5;
        let ck = Checkpoint::of(&policy);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let restored = back.into_policy().unwrap();
        assert_eq!(restored.theta, policy.theta);

        let mut bad = Checkpoint::of(&policy);
        bad.feature_map_version = "fmap-v0".into();
        assert!(bad.into_policy().is_err());
    }
}
