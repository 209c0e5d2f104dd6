//! Return, advantage and critic-target computation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::features::FrameId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "GAE")]
    Gae,
    #[serde(rename = "PQL")]
    Pql,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GAE" | "gae" => Ok(Estimator::Gae),
            "PQL" | "pql" => Ok(Estimator::Pql),
            other => Err(Error::Config(format!("unknown estimator {other:?}, expected GAE or PQL"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Gae => "GAE",
            Estimator::Pql => "PQL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Target,
    Source,
}

/// A contiguous stretch of one episode. `frames` holds every observation
/// including the successor of the last transition, so transition `t` goes
/// from `frames[t]` to `frames[t + 1]`. Frame ids index the pool of the
/// rollout's origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub frames: Vec<FrameId>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    /// The last transition ended the episode; otherwise the rollout was cut.
    pub terminal: bool,
    pub origin: Origin,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn truncated(&self) -> bool {
        !self.terminal
    }

    pub fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if self.rewards.len() != n || self.frames.len() != n + 1 {
            return Err(Error::shape(
                format!("{n} rewards and {} frames", n + 1),
                format!("{} rewards and {} frames", self.rewards.len(), self.frames.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub estimator: Estimator,
}

/// Discounted reward-to-go, `bootstrap` standing in for everything after the
/// last reward.
pub fn mc_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards`; its last entry is ignored when `terminal`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64, terminal: bool) -> Result<AdvantageBatch> {
    let n = rewards.len();
    if values.len() != n + 1 {
        return Err(Error::shape(format!("{} values", n + 1), values.len()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("GAE lambda must lie in [0, 1], got {lambda}")));
    }
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if terminal && t == n - 1 { 0.0 } else { values[t + 1] };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let value_targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageBatch {
        advantages: adv,
        value_targets,
        estimator: Estimator::Gae,
    })
}

/// Expected value of `q` under `probs`.
pub fn expected_value(q: &[f64; 4], probs: &[f64; 4]) -> f64 {
    q.iter().zip(probs).map(|(a, b)| a * b).sum()
}

/// Peng's Q(λ) targets with an expected-policy bootstrap and no importance
/// weights: `y_t = r_t + γ[(1-λ) V̄(h_{t+1}) + λ y_{t+1}]`, where
/// `V̄(h) = Σ_a π(a|h) Q(h, a)`. The advantage is `Q(h_t, a_t) - V̄(h_t)`.
///
/// `q` and `probs` cover every frame of the rollout (one more than rewards).
pub fn pql_targets(
    rewards: &[f64],
    actions: &[Action],
    q: &[[f64; 4]],
    probs: &[[f64; 4]],
    gamma: f64,
    lambda: f64,
    terminal: bool,
) -> Result<AdvantageBatch> {
    let n = rewards.len();
    if actions.len() != n || q.len() != n + 1 || probs.len() != n + 1 {
        return Err(Error::shape(
            format!("{n} actions, {} Q rows and {} policy rows", n + 1, n + 1),
            format!("{} / {} / {}", actions.len(), q.len(), probs.len()),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("PQL lambda must lie in [0, 1], got {lambda}")));
    }
    let vbar: Vec<f64> = q.iter().zip(probs).map(|(q, p)| expected_value(q, p)).collect();
    let mut targets = vec![0.0; n];
    for t in (0..n).rev() {
        let last = t == n - 1;
        let tail = if last {
            if terminal {
                0.0
            } else {
                vbar[n]
            }
        } else {
            (1.0 - lambda) * vbar[t + 1] + lambda * targets[t + 1]
        };
        targets[t] = rewards[t] + gamma * tail;
    }
    let advantages = (0..n).map(|t| q[t][actions[t].index()] - vbar[t]).collect();
    Ok(AdvantageBatch {
        advantages,
        value_targets: targets,
        estimator: Estimator::Pql,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    // Oracles below are written from the textbook definitions with plain
    // nested loops; they share no code with the estimators.

    fn oracle_mc(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                for l in 0..n - t {
                    s += gamma.powi(l as i32) * rewards[t + l];
                }
                s + gamma.powi((n - t) as i32) * bootstrap
            })
            .collect()
    }

    fn oracle_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64, terminal: bool) -> Vec<f64> {
        let n = rewards.len();
        let v = |i: usize| if terminal && i == n { 0.0 } else { values[i] };
        let delta: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * v(t + 1) - v(t)).collect();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                for l in 0..n - t {
                    s += (gamma * lambda).powi(l as i32) * delta[t + l];
                }
                s
            })
            .collect()
    }

    /// Forward view: mixture of n-step returns bootstrapped with V̄, the
    /// leftover weight on the longest available return.
    fn oracle_pql(rewards: &[f64], vbar: &[f64], gamma: f64, lambda: f64, terminal: bool) -> Vec<f64> {
        let n = rewards.len();
        let boot = |i: usize| if terminal && i == n { 0.0 } else { vbar[i] };
        (0..n)
            .map(|t| {
                let horizon = n - t;
                let nstep = |k: usize| {
                    let mut g = 0.0;
                    for l in 0..k {
                        g += gamma.powi(l as i32) * rewards[t + l];
                    }
                    g + gamma.powi(k as i32) * boot(t + k)
                };
                let mut total = 0.0;
                for k in 1..horizon {
                    total += (1.0 - lambda) * lambda.powi(k as i32 - 1) * nstep(k);
                }
                total + lambda.powi(horizon as i32 - 1) * nstep(horizon)
            })
            .collect()
    }

    fn random_case(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<f64>, Vec<f64>, f64, f64, bool) {
        let n = rng.gen_range(1..=max_len);
        let rewards = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = (0..=n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (rewards, values, rng.gen_range(0.0..0.999), rng.gen_range(0.0..=1.0), rng.gen_bool(0.5))
    }

    #[test]
    fn mc_returns_hand_cases() {
        assert_eq!(mc_returns(&[1.0], 0.99, 0.0), vec![1.0]);
        assert_eq!(mc_returns(&[0.0, 0.0, 1.0], 0.5, 0.0), vec![0.25, 0.5, 1.0]);
        assert!(mc_returns(&[], 0.9, 3.0).is_empty());
    }

    #[test]
    fn estimators_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let (r, v, gamma, lambda, terminal) = random_case(&mut rng, 6);
            let boot = if terminal { 0.0 } else { v[r.len()] };
            for (a, b) in mc_returns(&r, gamma, boot).iter().zip(oracle_mc(&r, gamma, boot)) {
                assert!((a - b).abs() < 1e-12);
            }
            let got = gae(&r, &v, gamma, lambda, terminal).unwrap();
            for (a, b) in got.advantages.iter().zip(oracle_gae(&r, &v, gamma, lambda, terminal)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_limits_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (r, v, gamma, _, _) = random_case(&mut rng, 6);
            let one = gae(&r, &v, gamma, 1.0, true).unwrap();
            let mc = mc_returns(&r, gamma, 0.0);
            for t in 0..r.len() {
                assert!((one.advantages[t] - (mc[t] - v[t])).abs() < 1e-10);
            }
            let zero = gae(&r, &v, gamma, 0.0, false).unwrap();
            for t in 0..r.len() {
                assert!((zero.advantages[t] - (r[t] + gamma * v[t + 1] - v[t])).abs() < 1e-10);
                assert!((zero.value_targets[t] - (r[t] + gamma * v[t + 1])).abs() < 1e-10);
            }
        }
        assert!(matches!(gae(&[1.0], &[0.0], 0.9, 0.5, true), Err(Error::Shape { .. })));
    }

    fn random_pql(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Action>, Vec<[f64; 4]>, Vec<[f64; 4]>) {
        let actions = (0..n).map(|_| Action::ALL[rng.gen_range(0..4)]).collect();
        let q = (0..=n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let probs = (0..=n)
            .map(|_| {
                let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
                let s: f64 = raw.iter().sum();
                raw.map(|x| x / s)
            })
            .collect();
        (actions, q, probs)
    }

    #[test]
    fn pql_matches_forward_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let (r, _, gamma, lambda, terminal) = random_case(&mut rng, 6);
            let (a, q, p) = random_pql(&mut rng, r.len());
            let vbar: Vec<f64> = q.iter().zip(&p).map(|(q, p)| expected_value(q, p)).collect();
            let got = pql_targets(&r, &a, &q, &p, gamma, lambda, terminal).unwrap();
            for (x, y) in got.value_targets.iter().zip(oracle_pql(&r, &vbar, gamma, lambda, terminal)) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
            for t in 0..r.len() {
                assert!((got.advantages[t] - (q[t][a[t].index()] - vbar[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pql_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, _, gamma, _, _) = random_case(&mut rng, 5);
        let (a, q, p) = random_pql(&mut rng, r.len());
        let zero = pql_targets(&r, &a, &q, &p, gamma, 0.0, false).unwrap();
        for t in 0..r.len() {
            let one_step = r[t] + gamma * expected_value(&q[t + 1], &p[t + 1]);
            assert!((zero.value_targets[t] - one_step).abs() < 1e-12);
        }
        for lambda in [0.0, 0.3, 1.0] {
            let single = pql_targets(&[0.7], &[Action::East], &q[..2], &p[..2], 0.9, lambda, true).unwrap();
            assert_eq!(single.value_targets, vec![0.7]);
        }
        assert!(pql_targets(&r, &a, &q[1..], &p, gamma, 0.5, true).is_err());
    }

    #[test]
    fn estimator_tags_parse() {
        assert_eq!("GAE".parse::<Estimator>().unwrap(), Estimator::Gae);
        assert_eq!("PQL".parse::<Estimator>().unwrap(), Estimator::Pql);
        assert!(matches!("foo".parse::<Estimator>(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn returns_are_linear_in_rewards(
            r in prop::collection::vec(-1.0f64..1.0, 1..8),
            gamma in 0.0f64..0.99,
            k in -3.0f64..3.0,
        ) {
            let scaled: Vec<f64> = r.iter().map(|x| x * k).collect();
            let a = mc_returns(&scaled, gamma, 0.0);
            let b = mc_returns(&r, gamma, 0.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - k * y).abs() < 1e-9);
            }
        }
    }
}
