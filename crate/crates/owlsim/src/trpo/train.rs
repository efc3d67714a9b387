//! Three-mode trainer over the toy policy: an offline filtered baseline, an
//! online dynamic-filter loop, and the full variant that adds replay
//! injection for all-failure groups and reuse of leftover rollouts.

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{run_episode_e2e, LearnedDriver};
use crate::gui_sim::{Env, World};
use crate::judgment::{judge_trajectory, JudgedTrajectory};
use crate::taskgen::TaskQuery;

use super::{
    compute_reward, fnv1a64, inject_replay, segment_trajectory, trpo_loss, AdvantageStats,
    PolicyParams, ReplayBuffer, StepInstance, TrpoError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TrpoFull,
    OnlineFilter,
    OfflineFilter,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::TrpoFull => "trpo_full",
            TrainMode::OnlineFilter => "online_filter",
            TrainMode::OfflineFilter => "offline_filter",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub group_size: usize,
    pub t_max: u32,
    pub k_history: usize,
    pub iterations: u32,
    /// Gradient passes over the batch per iteration; ratios drift off 1
    /// after the first pass, which is what engages the clipping.
    pub epochs: u32,
    pub lr: f64,
    pub eps_clip: f64,
    pub eps_adv: f64,
    pub replay_capacity: usize,
    pub refill_rounds: u32,
    /// L2 cap on the per-epoch gradient; guards against the advantage spike
    /// when the very first success lands on near-zero running std.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub temperature: f64,
    pub dim: usize,
    /// Replay injection into all-failure groups (full mode only by default).
    pub use_replay: bool,
    /// Reuse of dropped rollouts in the next update (full mode only by default).
    pub use_leftovers: bool,
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode, seed: u64) -> Self {
        let full = mode == TrainMode::TrpoFull;
        TrainConfig {
            mode,
            group_size: 8,
            t_max: 15,
            k_history: 3,
            iterations: 10,
            epochs: 4,
            lr: 0.6,
            eps_clip: 0.2,
            eps_adv: 1e-4,
            replay_capacity: 4,
            refill_rounds: 3,
            max_grad_norm: 5.0,
            seed,
            temperature: 1.0,
            dim: 2048,
            use_replay: full,
            use_leftovers: full,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u32,
    pub mode: String,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub dropped_groups: u32,
    pub replay_injections: u32,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str =
    "iteration,mode,success_rate,mean_reward,dropped_groups,replay_injections,grad_norm";

pub fn render_metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{:.6}\n",
            m.iteration,
            m.mode,
            m.success_rate,
            m.mean_reward,
            m.dropped_groups,
            m.replay_injections,
            m.grad_norm
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub policy: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
}

impl TrainResult {
    pub fn final_success_rate(&self) -> f64 {
        self.metrics.last().map(|m| m.success_rate).unwrap_or(0.0)
    }
}

fn fresh_traj_id(task: &TaskQuery, tag: &str, gi: usize) -> String {
    format!("{}#{tag}:{gi}", task.task_id)
}

/// One group of e2e rollouts for a task, judged. Member seeds are hashed
/// from the tag so every group is independently reproducible.
fn rollout_group(
    world: &Arc<World>,
    task: &TaskQuery,
    policy: &PolicyParams,
    cfg: &TrainConfig,
    tag: &str,
) -> Vec<JudgedTrajectory> {
    (0..cfg.group_size)
        .into_par_iter()
        .map(|gi| {
            let seed = fnv1a64(&format!("{tag}:{gi}:{}", task.task_id));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut driver = LearnedDriver { policy, rng: &mut rng };
            let mut env = Env::new(world.clone());
            let traj_id = fresh_traj_id(task, tag, gi);
            let traj =
                run_episode_e2e(task, &mut env, &mut driver, cfg.k_history, cfg.t_max, &traj_id);
            let verdict = judge_trajectory(world, task, &traj);
            JudgedTrajectory { traj, verdict }
        })
        .collect()
}

fn rewards_of(group: &[JudgedTrajectory]) -> Vec<f64> {
    group.iter().map(|j| compute_reward(&j.traj, j.correct())).collect()
}

fn zero_variance(rewards: &[f64]) -> bool {
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max - min == 0.0
}

/// Instances for a replayed trajectory: the recorded sampling log-probs are
/// stale, so the old log-probs are recomputed under the current theta_old.
fn segment_replayed(
    traj: &crate::trajectory::Trajectory,
    instruction: &str,
    app_names: &[String],
    advantage: f64,
    theta_old: &PolicyParams,
) -> Vec<StepInstance> {
    let mut stripped = traj.clone();
    for step in &mut stripped.steps {
        step.policy_meta = None;
    }
    segment_trajectory(&stripped, instruction, app_names, advantage, theta_old)
}

/// Leftover rollouts carried to the next iteration: reward plus instances
/// whose old log-probs were fixed at storage time. Staleness bound is one
/// iteration; unconsumed leftovers are discarded.
struct Leftover {
    reward: f64,
    instances: Vec<StepInstance>,
}

struct OnlineState {
    stats: AdvantageStats,
    buffer: ReplayBuffer,
    leftovers: Vec<Leftover>,
}

fn gradient_steps(
    policy: &mut PolicyParams,
    batch: &[StepInstance],
    cfg: &TrainConfig,
) -> Result<f64, TrpoError> {
    let mut grad_norm = 0.0;
    for _ in 0..cfg.epochs {
        let (_, mut grad) = trpo_loss(batch, policy, cfg.eps_clip)?;
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm > cfg.max_grad_norm {
            let shrink = cfg.max_grad_norm / grad_norm;
            for g in &mut grad {
                *g *= shrink;
            }
        }
        for (t, g) in policy.theta.iter_mut().zip(&grad) {
            *t -= cfg.lr * g;
        }
    }
    Ok(grad_norm)
}

fn online_iteration(
    world: &Arc<World>,
    tasks: &[TaskQuery],
    policy: &mut PolicyParams,
    state: &mut OnlineState,
    cfg: &TrainConfig,
    iter: u32,
) -> IterationMetrics {
    let theta_old = policy.clone();
    let app_names = world.app_names();
    let mut inject_rng =
        ChaCha8Rng::seed_from_u64(fnv1a64(&format!("{}:{iter}:inject", cfg.seed)));

    let mut usable: Vec<(usize, Vec<JudgedTrajectory>)> = Vec::new();
    let mut dropped_groups = 0u32;
    let mut replay_injections = 0u32;
    let mut fresh_successes = 0usize;
    let mut fresh_total = 0usize;
    let mut fresh_reward_sum = 0.0;
    let mut dropped_pool: Vec<(usize, Vec<JudgedTrajectory>)> = Vec::new();

    let mut open: Vec<usize> = (0..tasks.len()).collect();
    for round in 0..=cfg.refill_rounds {
        if open.is_empty() {
            break;
        }
        let mut still_open = Vec::new();
        for ti in open {
            let task = &tasks[ti];
            let tag = format!("{}:{iter}:r{round}", cfg.seed);
            let mut group = rollout_group(world, task, policy, cfg, &tag);
            fresh_total += group.len();
            fresh_successes += group.iter().filter(|j| j.correct()).count();
            fresh_reward_sum += rewards_of(&group).iter().sum::<f64>();
            if cfg.use_replay && inject_replay(&mut group, &mut state.buffer, &mut inject_rng) {
                replay_injections += 1;
            } else if cfg.use_replay {
                // inject_replay already ingested the group's successes.
            } else {
                for j in &group {
                    state.buffer.offer(j);
                }
            }
            if zero_variance(&rewards_of(&group)) {
                dropped_groups += 1;
                dropped_pool.push((ti, group));
                still_open.push(ti);
            } else {
                usable.push((ti, group));
            }
        }
        open = still_open;
    }
    usable.sort_by_key(|(ti, _)| *ti);

    // Assemble the batch: fresh usable groups first, then last iteration's
    // leftovers. Advantages always come from the pre-update running stats.
    let mut batch: Vec<StepInstance> = Vec::new();
    for (ti, group) in &usable {
        let task = &tasks[*ti];
        let tags: Vec<String> = (0..=cfg.refill_rounds)
            .flat_map(|round| {
                let tag = format!("{}:{iter}:r{round}", cfg.seed);
                (0..cfg.group_size).map(move |gi| format!("{}#{tag}:{gi}", task.task_id))
            })
            .collect();
        for judged in group {
            let reward = compute_reward(&judged.traj, judged.correct());
            let advantage = state.stats.advantage_and_update(reward);
            let replayed = !tags.contains(&judged.traj.traj_id);
            let instances = if replayed {
                segment_replayed(
                    &judged.traj,
                    &task.instruction,
                    &app_names,
                    advantage,
                    &theta_old,
                )
            } else {
                segment_trajectory(
                    &judged.traj,
                    &task.instruction,
                    &app_names,
                    advantage,
                    &theta_old,
                )
            };
            batch.extend(instances);
        }
    }
    if cfg.use_leftovers {
        for leftover in state.leftovers.drain(..) {
            let advantage = state.stats.advantage_and_update(leftover.reward);
            batch.extend(leftover.instances.into_iter().map(|mut inst| {
                inst.advantage = advantage;
                inst
            }));
        }
        // Stash up to one dropped group per task for the next update.
        for (ti, group) in dropped_pool.iter().take(tasks.len()) {
            let task = &tasks[*ti];
            for judged in group {
                let reward = compute_reward(&judged.traj, judged.correct());
                state.leftovers.push(Leftover {
                    reward,
                    instances: segment_trajectory(
                        &judged.traj,
                        &task.instruction,
                        &app_names,
                        0.0,
                        &theta_old,
                    ),
                });
            }
        }
    }

    let grad_norm = if batch.is_empty() {
        0.0
    } else {
        gradient_steps(policy, &batch, cfg).expect("non-empty batch")
    };

    IterationMetrics {
        iteration: iter,
        mode: cfg.mode.name().to_string(),
        success_rate: fresh_successes as f64 / fresh_total.max(1) as f64,
        mean_reward: fresh_reward_sum / fresh_total.max(1) as f64,
        dropped_groups,
        replay_injections,
        grad_norm,
    }
}

/// Offline dataset: one probe group per task under the initial policy,
/// tasks with uniform outcomes pruned, advantages group-normalized.
struct OfflineState {
    batch: Vec<StepInstance>,
    pruned: u32,
}

fn offline_probe(
    world: &Arc<World>,
    tasks: &[TaskQuery],
    policy: &PolicyParams,
    cfg: &TrainConfig,
) -> OfflineState {
    let app_names = world.app_names();
    let mut batch = Vec::new();
    let mut pruned = 0u32;
    for task in tasks {
        let tag = format!("{}:probe", cfg.seed);
        let group = rollout_group(world, task, policy, cfg, &tag);
        let rewards = rewards_of(&group);
        if zero_variance(&rewards) {
            pruned += 1;
            continue;
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let var =
            rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rewards.len() as f64;
        let std = var.sqrt();
        for (judged, reward) in group.iter().zip(&rewards) {
            let advantage = (reward - mean) / (std + cfg.eps_adv);
            batch.extend(segment_trajectory(
                &judged.traj,
                &task.instruction,
                &app_names,
                advantage,
                policy,
            ));
        }
    }
    OfflineState { batch, pruned }
}

fn offline_iteration(
    world: &Arc<World>,
    tasks: &[TaskQuery],
    policy: &mut PolicyParams,
    offline: &OfflineState,
    cfg: &TrainConfig,
    iter: u32,
) -> IterationMetrics {
    let grad_norm = if offline.batch.is_empty() {
        0.0
    } else {
        gradient_steps(policy, &offline.batch, cfg).expect("non-empty batch")
    };

    // Held-out evaluation rollouts for the metrics row; not used to update.
    let mut successes = 0usize;
    let mut total = 0usize;
    let mut reward_sum = 0.0;
    for task in tasks {
        let tag = format!("{}:{iter}:eval", cfg.seed);
        let group = rollout_group(world, task, policy, cfg, &tag);
        total += group.len();
        successes += group.iter().filter(|j| j.correct()).count();
        reward_sum += rewards_of(&group).iter().sum::<f64>();
    }

    IterationMetrics {
        iteration: iter,
        mode: cfg.mode.name().to_string(),
        success_rate: successes as f64 / total.max(1) as f64,
        mean_reward: reward_sum / total.max(1) as f64,
        dropped_groups: if iter == 0 { offline.pruned } else { 0 },
        replay_injections: 0,
        grad_norm,
    }
}

pub fn train(world: &Arc<World>, tasks: &[TaskQuery], cfg: &TrainConfig) -> TrainResult {
    assert!(!tasks.is_empty());
    let mut policy = PolicyParams::new(cfg.dim, cfg.temperature);
    let mut metrics = Vec::with_capacity(cfg.iterations as usize);
    match cfg.mode {
        TrainMode::OfflineFilter => {
            let offline = offline_probe(world, tasks, &policy, cfg);
            for iter in 0..cfg.iterations {
                metrics.push(offline_iteration(world, tasks, &mut policy, &offline, cfg, iter));
            }
        }
        TrainMode::OnlineFilter | TrainMode::TrpoFull => {
            let mut state = OnlineState {
                stats: AdvantageStats::new(cfg.eps_adv),
                buffer: ReplayBuffer::new(cfg.replay_capacity),
                leftovers: Vec::new(),
            };
            for iter in 0..cfg.iterations {
                metrics.push(online_iteration(world, tasks, &mut policy, &mut state, cfg, iter));
            }
        }
    }
    TrainResult { policy, metrics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::taskgen::generate_pool;

    fn small_cfg(mode: TrainMode) -> TrainConfig {
        let mut cfg = TrainConfig::for_mode(mode, 11);
        cfg.iterations = 3;
        cfg.group_size = 4;
        cfg.dim = 512;
        cfg
    }

    #[test]
    fn training_is_seed_deterministic() {
        let world = fixtures::fixture_world();
        let tasks = generate_pool(&world, 4, 5, 2).unwrap();
        let cfg = small_cfg(TrainMode::TrpoFull);
        let a = train(&world, &tasks, &cfg);
        let b = train(&world, &tasks, &cfg);
        assert_eq!(a.policy.theta, b.policy.theta);
        assert_eq!(render_metrics_csv(&a.metrics), render_metrics_csv(&b.metrics));
    }

    #[test]
    fn full_mode_without_extras_matches_online_filter() {
        let world = fixtures::fixture_world();
        let tasks = generate_pool(&world, 4, 6, 2).unwrap();
        let mut full = small_cfg(TrainMode::TrpoFull);
        full.use_replay = false;
        full.use_leftovers = false;
        let online = small_cfg(TrainMode::OnlineFilter);
        let a = train(&world, &tasks, &full);
        let b = train(&world, &tasks, &online);
        assert_eq!(a.policy.theta, b.policy.theta);
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ma.success_rate, mb.success_rate);
            assert_eq!(ma.mean_reward, mb.mean_reward);
            assert_eq!(ma.dropped_groups, mb.dropped_groups);
            assert_eq!(ma.replay_injections, mb.replay_injections);
            assert_eq!(ma.grad_norm, mb.grad_norm);
        }
    }

    #[test]
    fn metrics_csv_has_expected_header_and_rows() {
        let world = fixtures::fixture_world();
        let tasks = generate_pool(&world, 2, 7, 2).unwrap();
        let mut cfg = small_cfg(TrainMode::OfflineFilter);
        cfg.iterations = 2;
        let result = train(&world, &tasks, &cfg);
        let csv = render_metrics_csv(&result.metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.count(), 2);
        assert!(csv.contains("offline_filter"));
    }
}
