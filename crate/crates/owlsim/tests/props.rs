//! Property tests for the small pure helpers: summary grammar, history
//! compression, and task reweighting.

use proptest::prelude::*;

use owlsim::agents::{compress_history, parse_summary, render_summary, HistoryEntry};
use owlsim::gui_sim::Action;
use owlsim::pipeline::{reweight_tasks, TaskStats};

proptest! {
    #[test]
    fn summary_roundtrip(
        subgoal in "[a-z0-9 ]{0,24}",
        status in "[a-z_]{1,12}",
        widget in "[a-z_]{1,8}",
    ) {
        let action = Action::Click { widget_id: widget };
        let rendered = render_summary(&subgoal, &status, &action);
        let (got_subgoal, got_status) = parse_summary(&rendered).unwrap();
        prop_assert_eq!(got_subgoal, subgoal);
        prop_assert_eq!(got_status, status);
    }

    #[test]
    fn compression_keeps_exactly_the_last_k_observations(
        len in 0usize..12,
        k in 0usize..6,
    ) {
        let mut history: Vec<HistoryEntry> = (0..len)
            .map(|i| HistoryEntry {
                conclusion: format!("c{i}"),
                action: Action::Wait,
                observation: Some(format!("o{i}")),
            })
            .collect();
        compress_history(&mut history, k);
        for (i, entry) in history.iter().enumerate() {
            let expected = format!("c{i}");
            prop_assert_eq!(entry.conclusion.as_str(), expected.as_str());
            let keep = i + k >= len;
            prop_assert_eq!(entry.observation.is_some(), keep, "index {} of {}", i, len);
        }
    }

    #[test]
    fn reweighting_is_mean_one_and_anti_monotone(
        rows in prop::collection::vec((1u32..10, 0u32..10), 1..8),
        delta in 0.01f64..1.0,
    ) {
        let stats: Vec<TaskStats> = rows
            .iter()
            .enumerate()
            .map(|(i, (attempts, successes))| TaskStats {
                task_id: format!("t{i}"),
                attempts: *attempts,
                successes: (*successes).min(*attempts),
            })
            .collect();
        let weights = reweight_tasks(&stats, delta);
        prop_assert_eq!(weights.len(), stats.len());
        let mean: f64 = weights.values().sum::<f64>() / weights.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for a in &stats {
            for b in &stats {
                if a.p_succ() < b.p_succ() {
                    prop_assert!(weights[&a.task_id] > weights[&b.task_id]);
                }
            }
        }
    }
}
