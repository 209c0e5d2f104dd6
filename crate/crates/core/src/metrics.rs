//! The metrics table written by training runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "env_steps",
    "eval_mean_reward",
    "eval_std_reward",
    "policy_loss",
    "value_or_q_loss",
    "da_critic_estimate",
    "inv_action_accuracy",
    "inv_reward_mse",
    "mean_weight",
    "kl_diag",
    "wall_seconds",
];

/// Diagnostics of one training iteration. `None` marks a stage that did
/// not run (no source data, or DA disabled).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub policy_loss: f64,
    pub value_or_q_loss: f64,
    pub da_critic_estimate: Option<f64>,
    pub inv_action_accuracy: Option<f64>,
    pub inv_reward_mse: Option<f64>,
    pub mean_weight: f64,
    pub max_weight: f64,
    pub kl_diag: f64,
}

/// One evaluation point. Training columns hold the most recent completed
/// iteration and are empty before the first one.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub eval_mean_reward: f64,
    pub eval_std_reward: f64,
    pub train: Option<IterationMetrics>,
    pub wall_seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let t = self.train.as_ref();
        let fields = [
            self.env_steps.to_string(),
            self.eval_mean_reward.to_string(),
            self.eval_std_reward.to_string(),
            opt(t.map(|m| m.policy_loss)),
            opt(t.map(|m| m.value_or_q_loss)),
            opt(t.and_then(|m| m.da_critic_estimate)),
            opt(t.and_then(|m| m.inv_action_accuracy)),
            opt(t.and_then(|m| m.inv_reward_mse)),
            opt(t.map(|m| m.mean_weight)),
            opt(t.map(|m| m.kl_diag)),
            self.wall_seconds.to_string(),
        ];
        fields.join(",")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_stages_are_empty_fields() {
        let row = MetricsRow {
            env_steps: 2000,
            eval_mean_reward: 0.992,
            eval_std_reward: 0.0,
            train: Some(IterationMetrics {
                iteration: 0,
                env_steps: 2048,
                policy_loss: 1.25,
                value_or_q_loss: 0.5,
                da_critic_estimate: None,
                inv_action_accuracy: Some(0.75),
                inv_reward_mse: None,
                mean_weight: 1.0,
                max_weight: 3.0,
                kl_diag: 0.001,
            }),
            wall_seconds: 0.0,
        };
        assert_eq!(row.to_csv_line(), "2000,0.992,0,1.25,0.5,,0.75,,1,0.001,0");
        let text = metrics_csv(&[row]);
        assert!(text.starts_with("env_steps,eval_mean_reward,"));
        assert_eq!(text.lines().next().unwrap().split(',').count(), 11);
    }
}
