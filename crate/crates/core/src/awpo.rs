//! Advantage-weighted policy regression, replay storage and environment
//! interaction.

use std::collections::{HashMap, VecDeque};

use rand::Rng;

use crate::env::{Action, EnvState, GridEnv};
use crate::error::{Error, Result};
use crate::features::{embed, FrameId, FramePool};
use crate::nn::{log_softmax, softmax, Flow, ModelSet, Net, Part, Tensor};
use crate::policy_eval::{Origin, Rollout};

/// `w_i = min(exp(A_i / temperature), cap)`, optionally after shifting and
/// scaling the batch to zero mean and unit variance.
pub fn awpo_weights(advantages: &[f64], temperature: f64, cap: f64, standardize: bool) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "AWPOConfig.temperature: λ > 0 required, got {temperature}"
        )));
    }
    let mut adv = advantages.to_vec();
    if standardize && adv.len() > 1 {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
    Ok(adv.iter().map(|a| (a / temperature).exp().min(cap)).collect())
}

/// `-mean_i w_i log π(a_i | h_i)` over detached embeddings, with the
/// gradient for the policy parameters.
pub fn policy_loss(policy: &Net<f32>, h: &Tensor<f32>, actions: &[Action], weights: &[f64]) -> Result<(f64, Vec<f32>)> {
    let n = h.batch();
    if actions.len() != n || weights.len() != n || n == 0 {
        return Err(Error::shape(
            format!("{n} actions and weights"),
            format!("{} / {}", actions.len(), weights.len()),
        ));
    }
    let (logits, tape) = policy.forward_tape(h)?;
    let mut loss = 0.0;
    let mut g = vec![0.0f32; n * Action::COUNT];
    for i in 0..n {
        let row = logits.row(i);
        let logp = log_softmax(row);
        let p = softmax(row);
        let a = actions[i].index();
        loss -= weights[i] * logp[a] as f64;
        let w = (weights[i] / n as f64) as f32;
        for k in 0..Action::COUNT {
            let y = if k == a { 1.0 } else { 0.0 };
            g[i * Action::COUNT + k] = w * (p[k] - y);
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("policy loss is {loss}")));
    }
    let mut grads = vec![0.0; policy.params.len()];
    policy.backward(&tape, &g, &mut grads, false)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(π_old ‖ π_new)`
    OldToNew,
    /// `KL(π_new ‖ π_old)`
    NewToOld,
}

pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Mean categorical KL between two policies over a batch of embeddings.
pub fn diagnostic_kl(old: &Net<f32>, new: &Net<f32>, h: &Tensor<f32>, dir: KlDirection) -> Result<f64> {
    let a = old.forward(h)?;
    let b = new.forward(h)?;
    let n = h.batch();
    if n == 0 {
        return Ok(0.0);
    }
    let probs = |row: &[f32]| -> Vec<f64> {
        let lp = log_softmax(row);
        lp.iter().map(|&x| (x as f64).exp()).collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let (p, q) = (probs(a.row(i)), probs(b.row(i)));
        total += match dir {
            KlDirection::OldToNew => categorical_kl(&p, &q),
            KlDirection::NewToOld => categorical_kl(&q, &p),
        };
    }
    Ok(total / n as f64)
}

/// FIFO store of target rollouts, bounded in transitions. Only frame ids
/// into `pool` are kept; embeddings are recomputed by every update.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub pool: FramePool,
    rollouts: VecDeque<Rollout>,
    capacity: usize,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            pool: FramePool::new(),
            rollouts: VecDeque::new(),
            capacity,
            transitions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter()
    }

    /// Appends a rollout, dropping the oldest transitions beyond capacity.
    pub fn push(&mut self, rollout: Rollout) -> Result<()> {
        rollout.check()?;
        if rollout.origin != Origin::Target {
            return Err(Error::Usage("the replay buffer holds target rollouts only".into()));
        }
        if rollout.is_empty() {
            return Ok(());
        }
        self.transitions += rollout.len();
        self.rollouts.push_back(rollout);
        while self.transitions > self.capacity {
            let excess = self.transitions - self.capacity;
            let oldest = self.rollouts.front_mut().expect("non-empty while over capacity");
            if oldest.len() <= excess {
                self.transitions -= oldest.len();
                self.rollouts.pop_front();
            } else {
                oldest.frames.drain(..excess);
                oldest.actions.drain(..excess);
                oldest.rewards.drain(..excess);
                self.transitions -= excess;
            }
        }
        Ok(())
    }
}

/// Draws an index from a categorical distribution.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax(values: &[f32]) -> usize {
    (1..values.len()).fold(0, |best, k| if values[k] > values[best] { k } else { best })
}

/// Policy probabilities per target frame for fixed parameters.
pub struct PolicyCache<'a> {
    models: &'a ModelSet,
    probs: HashMap<FrameId, Vec<f32>>,
}

impl<'a> PolicyCache<'a> {
    pub fn new(models: &'a ModelSet) -> Self {
        Self {
            models,
            probs: HashMap::new(),
        }
    }

    pub fn probs(&mut self, pool: &FramePool, id: FrameId) -> Result<&[f32]> {
        if !self.probs.contains_key(&id) {
            let h = embed(self.models, Part::EncT, pool, &[id], Flow::Stop)?;
            let logits = self.models.net(Part::Policy).forward(&h.rows)?;
            self.probs.insert(id, softmax(logits.row(0)));
        }
        Ok(&self.probs[&id])
    }
}

/// Environment interaction state that persists across iterations, so an
/// episode may span several collection calls.
#[derive(Debug, Clone)]
pub struct Collector {
    pub env: GridEnv,
    state: EnvState,
    frame: Option<FrameId>,
}

impl Collector {
    pub fn new(env: GridEnv) -> Self {
        let (state, _) = env.reset();
        Self {
            env,
            state,
            frame: None,
        }
    }

    /// Samples exactly `n` transitions from the categorical policy. Rollouts
    /// are split at episode ends; the last one is cut unless its episode
    /// ended on the final step. `on_step` runs after every transition with
    /// the number of transitions taken so far in this call.
    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        models: &ModelSet,
        pool: &mut FramePool,
        n: usize,
        rng: &mut R,
        mut on_step: impl FnMut(usize, &mut FramePool) -> Result<()>,
    ) -> Result<Vec<Rollout>> {
        let mut cache = PolicyCache::new(models);
        let mut out = Vec::new();
        let mut cur = self.start_rollout(pool);
        for taken in 1..=n {
            let id = *cur.frames.last().expect("rollouts start with a frame");
            let action = Action::ALL[sample_categorical(cache.probs(pool, id)?, rng)];
            let (next, res) = self.env.step(&self.state, action)?;
            let next_id = pool.intern(&res.observation);
            cur.actions.push(action);
            cur.rewards.push(res.reward);
            cur.frames.push(next_id);
            if res.done {
                cur.terminal = true;
                out.push(cur);
                let (state, obs) = self.env.reset();
                self.state = state;
                self.frame = Some(pool.intern(&obs));
                cur = self.start_rollout(pool);
            } else {
                self.state = next;
                self.frame = Some(next_id);
            }
            on_step(taken, pool)?;
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        Ok(out)
    }

    fn start_rollout(&mut self, pool: &mut FramePool) -> Rollout {
        let id = match self.frame {
            Some(id) => id,
            None => {
                let id = pool.intern(&self.env.render(&self.state));
                self.frame = Some(id);
                id
            }
        };
        Rollout {
            frames: vec![id],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
            origin: Origin::Target,
        }
    }
}

/// Undiscounted return of one argmax-policy episode from reset.
pub fn eval_episode(models: &ModelSet, env: &GridEnv, pool: &mut FramePool) -> Result<f64> {
    let mut cache = PolicyCache::new(models);
    let (mut state, obs) = env.reset();
    let mut id = pool.intern(&obs);
    let mut total = 0.0;
    loop {
        let action = Action::ALL[argmax(cache.probs(pool, id)?)];
        let (next, res) = env.step(&state, action)?;
        total += res.reward;
        if res.done {
            return Ok(total);
        }
        state = next;
        id = pool.intern(&res.observation);
    }
}

/// Mean and population standard deviation of `episodes` argmax returns.
pub fn evaluate(models: &ModelSet, env: &GridEnv, pool: &mut FramePool, episodes: usize) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let returns = (0..episodes)
        .map(|_| eval_episode(models, env, pool))
        .collect::<Result<Vec<_>>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::env::GridConfig;
    use crate::nn::ArchConfig;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            obs_height: 20,
            obs_width: 20,
            embed_dim: 8,
            hidden: 16,
            convs: vec![(4, 5, 2), (4, 3, 2)],
            copy_target_encoder_init: true,
        }
    }

    fn small_env() -> GridEnv {
        GridEnv::new(GridConfig {
            obs_height: 20,
            obs_width: 20,
            ..GridConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn weight_hand_cases() {
        let w = awpo_weights(&[0.0, 2f64.ln(), 1000.0], 1.0, 20.0, false).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert_eq!(w[2], 20.0);
        let w = awpo_weights(&[0.5 * 2f64.ln()], 0.5, 20.0, false).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        let err = awpo_weights(&[1.0], 0.0, 20.0, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("λ > 0"));
    }

    #[test]
    fn standardized_weights_ignore_shift_and_scale() {
        let a = [0.3, -1.0, 2.0, 0.7];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x + 11.0).collect();
        let wa = awpo_weights(&a, 1.0, 20.0, true).unwrap();
        let wb = awpo_weights(&b, 1.0, 20.0, true).unwrap();
        for (x, y) in wa.iter().zip(&wb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_are_positive_monotone_and_capped(
            mut adv in prop::collection::vec(-50.0f64..50.0, 1..20),
            temp in 0.05f64..10.0,
        ) {
            adv.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let w = awpo_weights(&adv, temp, 20.0, false).unwrap();
            for pair in w.windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
            prop_assert!(w.iter().all(|&x| x >= 0.0 && x <= 20.0));
            // Below about exp(-745) the weight underflows to zero.
            for (a, x) in adv.iter().zip(&w) {
                prop_assert!(a / temp < -700.0 || *x > 0.0);
            }
        }

        #[test]
        fn huge_temperature_flattens_weights(adv in prop::collection::vec(-100.0f64..100.0, 1..50)) {
            let w = awpo_weights(&adv, 1e6, 20.0, false).unwrap();
            prop_assert!(w.iter().all(|x| (x - 1.0).abs() <= 1e-3));
        }

        #[test]
        fn constant_shift_keeps_weight_ratios(
            adv in prop::collection::vec(-3.0f64..3.0, 2..10),
            shift in -2.0f64..2.0,
        ) {
            let w = awpo_weights(&adv, 1.0, f64::INFINITY, false).unwrap();
            let shifted: Vec<f64> = adv.iter().map(|a| a + shift).collect();
            let ws = awpo_weights(&shifted, 1.0, f64::INFINITY, false).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((b / a - shift.exp()).abs() < 1e-9 * shift.exp());
            }
        }
    }

    fn zero_policy(d: usize) -> Net<f32> {
        let arch = ArchConfig {
            embed_dim: d,
            hidden: 6,
            ..ArchConfig::default()
        }
        .head_arch(Part::Policy)
        .unwrap();
        let mut net = Net::zeros(std::sync::Arc::new(arch));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let last = net.arch.offset(2);
        for v in &mut net.params[..last] {
            *v = rng.gen_range(-0.5..0.5);
        }
        net
    }

    #[test]
    fn uniform_policy_loss_is_log_four() {
        let net = zero_policy(3);
        let h = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let acts = [Action::East, Action::North];
        let (loss, _) = policy_loss(&net, &h, &acts, &[1.0, 1.0]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-6);
        let (double, _) = policy_loss(&net, &h, &acts, &[2.0, 2.0]).unwrap();
        assert!((double - 2.0 * loss).abs() < 1e-6);
    }

    #[test]
    fn unit_weights_give_mean_nll() {
        let models = ModelSet::init(&ArchConfig { embed_dim: 4, hidden: 5, ..ArchConfig::default() }, 2).unwrap();
        let mut net = models.net(Part::Policy).clone();
        net.params.iter_mut().for_each(|v| *v *= 30.0);
        let h = Tensor::matrix(3, 4, (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let acts = [Action::South, Action::West, Action::North];
        let (loss, _) = policy_loss(&net, &h, &acts, &[1.0; 3]).unwrap();
        let logits = net.forward(&h).unwrap();
        let nll: f64 = (0..3)
            .map(|i| {
                let row = logits.row(i);
                let lse = row.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
                lse - row[acts[i].index()] as f64
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - nll).abs() < 1e-5, "{loss} vs {nll}");
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let models = ModelSet::init(&ArchConfig { embed_dim: 4, hidden: 5, ..ArchConfig::default() }, 5).unwrap();
        let net = models.net(Part::Policy).clone();
        let h = Tensor::matrix(3, 4, (0..12).map(|i| (i as f32 * 0.61).cos()).collect()).unwrap();
        let acts = [Action::South, Action::West, Action::East];
        let w = [0.5, 2.0, 1.5];
        let (_, g) = policy_loss(&net, &h, &acts, &w).unwrap();
        let to64 = |n: &Net<f32>| -> Net<f64> { n.cast() };
        let h64: Tensor<f64> = h.cast();
        let loss64 = |n: &Net<f64>| {
            let logits = n.forward(&h64).unwrap();
            (0..3)
                .map(|i| -w[i] * log_softmax(logits.row(i))[acts[i].index()])
                .sum::<f64>()
                / 3.0
        };
        let base = to64(&net);
        for i in (0..net.params.len()).step_by(7) {
            let mut up = base.clone();
            up.params[i] += 1e-5;
            let mut dn = base.clone();
            dn.params[i] -= 1e-5;
            let num = (loss64(&up) - loss64(&dn)) / 2e-5;
            assert!((num - g[i] as f64).abs() < 1e-4 * num.abs().max(1e-2), "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn kl_hand_cases() {
        let u = [0.25; 4];
        let p: [f64; 4] = [0.97, 0.01, 0.01, 0.01];
        let want: f64 = p.iter().map(|pi| 0.25 * (0.25 / pi).ln()).sum();
        assert!((categorical_kl(&u, &p) - want).abs() < 1e-12);
        assert_eq!(categorical_kl(&p, &p), 0.0);

        let net = zero_policy(3);
        let h = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(diagnostic_kl(&net, &net, &h, KlDirection::OldToNew).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let mut draw = || {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(1e-3..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (draw(), draw());
            assert!(categorical_kl(&p, &q) >= -1e-15);
        }
    }

    fn rollout(frames: Vec<FrameId>) -> Rollout {
        let n = frames.len() - 1;
        Rollout {
            frames,
            actions: vec![Action::North; n],
            rewards: (0..n).map(|i| i as f64).collect(),
            terminal: false,
            origin: Origin::Target,
        }
    }

    #[test]
    fn buffer_drops_oldest_transitions_first() {
        let mut buf = ReplayBuffer::new(5);
        buf.push(rollout(vec![0, 1, 2, 3])).unwrap();
        buf.push(rollout(vec![4, 5, 6])).unwrap();
        assert_eq!(buf.len(), 5);
        buf.push(rollout(vec![7, 8])).unwrap();
        assert_eq!(buf.len(), 5);
        let first = buf.rollouts().next().unwrap();
        assert_eq!(first.frames, vec![1, 2, 3]);
        assert_eq!(first.rewards, vec![1.0, 2.0]);
        assert!(buf.rollouts().all(|r| r.check().is_ok()));
        buf.push(rollout(vec![9, 10, 11, 12, 13, 14, 15])).unwrap();
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.rollouts().count(), 1);
        assert_eq!(buf.rollouts().next().unwrap().frames, vec![10, 11, 12, 13, 14, 15]);
    }

    #[test]
    fn collection_is_exact_and_reproducible() {
        let models = ModelSet::init(&small_arch(), 0).unwrap();
        let run = |n: usize| {
            let mut c = Collector::new(small_env());
            let mut pool = FramePool::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut calls = 0;
            let r = c
                .collect(&models, &mut pool, n, &mut rng, |_, _| {
                    calls += 1;
                    Ok(())
                })
                .unwrap();
            assert_eq!(calls, n);
            r
        };
        let one = run(1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 1);
        let a = run(1500);
        assert_eq!(a, run(1500));
        assert_eq!(a.iter().map(Rollout::len).sum::<usize>(), 1500);
        assert!(a.iter().all(|r| r.len() <= 512 && r.check().is_ok()));
        assert!(a[..a.len() - 1].iter().all(|r| r.terminal));
    }

    #[test]
    fn episodes_continue_across_calls() {
        let models = ModelSet::init(&small_arch(), 0).unwrap();
        let mut c = Collector::new(small_env());
        let mut pool = FramePool::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = c.collect(&models, &mut pool, 3, &mut rng, |_, _| Ok(())).unwrap();
        let second = c.collect(&models, &mut pool, 3, &mut rng, |_, _| Ok(())).unwrap();
        let last = first.last().unwrap();
        if !last.terminal {
            assert_eq!(second[0].frames[0], *last.frames.last().unwrap());
        }
    }

    #[test]
    fn untrained_argmax_policy_pays_the_step_penalty() {
        let models = ModelSet::init(&small_arch(), 0).unwrap();
        let env = small_env();
        let mut pool = FramePool::new();
        let (mean, std) = evaluate(&models, &env, &mut pool, 3).unwrap();
        assert_eq!(std, 0.0);
        // Either the goal is reached or every one of the 512 steps is penalized.
        assert!(mean > 0.0 || (mean + 0.512).abs() < 1e-9, "{mean}");
        assert!(evaluate(&models, &env, &mut pool, 0).is_err());
    }
}
