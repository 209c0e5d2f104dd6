//! The training loop: collect, align, label source pairs, estimate
//! advantages, fit the critic, regress the policy.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::awpo::{awpo_weights, diagnostic_kl, evaluate, policy_loss, Collector, KlDirection, ReplayBuffer};
use crate::config::RunConfig;
use crate::dataset::FrameDataset;
use crate::env::{Action, GridEnv};
use crate::error::{Error, Result};
use crate::features::{embed, embed_pool, gather, FrameId};
use crate::metrics::{write_metrics, IterationMetrics, MetricsRow};
use crate::nn::{save_checkpoint, softmax, Checkpoint, Flow, ModelGrads, ModelSet, Part, RngState, Tensor};
use crate::obs2demo::{
    da_update, estimate_source_tuples, inverse_losses, inverse_step, source_rollouts, EmbeddingNorm, EstimatedTuple,
    SourceData,
};
use crate::policy_eval::{gae, mc_returns, pql_targets, Estimator, Rollout};

const COLLECT: usize = 0;
const UPDATE: usize = 1;
const DA: usize = 2;
const ESTIMATE: usize = 3;

/// Per-transition training data for one iteration.
#[derive(Debug, Clone, Copy)]
struct Sample {
    frame: FrameId,
    action: Action,
    advantage: f64,
    target: f64,
}

/// A single target transition for the inverse models.
#[derive(Debug, Clone, Copy)]
struct Transition {
    frame: FrameId,
    next: FrameId,
    action: Action,
    reward: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub models: ModelSet,
    pub buffer: ReplayBuffer,
    pub source: Option<SourceData>,
    /// Source tuples from the latest estimation pass.
    pub tuples: Vec<EstimatedTuple>,
    pub iteration: u64,
    pub env_steps: u64,
    pub rows: Vec<MetricsRow>,
    collector: Collector,
    eval_env: GridEnv,
    rngs: Vec<ChaCha8Rng>,
    last: Option<IterationMetrics>,
    started: Instant,
}

fn stream(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + id as u64);
    rng
}

fn pick<T: Copy, R: Rng + ?Sized>(items: &[T], n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| items[rng.gen_range(0..items.len())]).collect()
}

fn stack(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let d = a.row_len();
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor::matrix(a.batch() + b.batch(), d, data)
}

impl Trainer {
    /// `source` is required when `config.awpo.use_source` is set.
    pub fn new(config: RunConfig, source: Option<&FrameDataset>) -> Result<Self> {
        config.validate()?;
        let source = if config.awpo.use_source {
            let ds = source.ok_or_else(|| Error::Config("use_source is set but no source dataset was given".into()))?;
            if (ds.meta.height, ds.meta.width) != (config.arch.obs_height, config.arch.obs_width) {
                return Err(Error::Config(format!(
                    "source frames are {}x{}, the encoders expect {}x{}",
                    ds.meta.height, ds.meta.width, config.arch.obs_height, config.arch.obs_width
                )));
            }
            let chunk = if ds.meta.theme == crate::dataset::ThemeTag::External {
                config.dataset.chunk_len
            } else {
                usize::MAX
            };
            Some(SourceData::from_dataset(ds, chunk)?)
        } else {
            None
        };
        let env = GridEnv::new(config.env.clone())?;
        Ok(Self {
            models: ModelSet::init(&config.arch, config.seed)?,
            buffer: ReplayBuffer::new(config.awpo.buffer_capacity),
            source,
            tuples: Vec::new(),
            iteration: 0,
            env_steps: 0,
            rows: Vec::new(),
            collector: Collector::new(env.clone()),
            eval_env: env,
            rngs: (0..4).map(|i| stream(config.seed, i)).collect(),
            last: None,
            started: Instant::now(),
            config,
        })
    }

    fn wall(&self) -> f64 {
        if self.config.log_wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Appends an evaluation row at the current step count.
    pub fn evaluate_now(&mut self) -> Result<&MetricsRow> {
        let (mean, std) = evaluate(
            &self.models,
            &self.eval_env,
            &mut self.buffer.pool,
            self.config.eval_episodes,
        )?;
        self.rows.push(MetricsRow {
            env_steps: self.env_steps,
            eval_mean_reward: mean,
            eval_std_reward: std,
            train: self.last.clone(),
            wall_seconds: self.wall(),
        });
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        self.rngs.iter().map(RngState::capture).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            models: self.models.clone(),
            rngs: self.rng_states(),
            iteration: self.iteration,
            env_steps: self.env_steps,
        }
    }

    /// One iteration; numeric failures carry the iteration index.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let iteration = self.iteration;
        self.iteration_inner().map_err(|e| match e {
            Error::Numeric(message) => Error::NumericAt { iteration: iteration as usize, message },
            other => other,
        })
    }

    fn iteration_inner(&mut self) -> Result<IterationMetrics> {
        let fresh = self.collect()?;
        let cfg = self.config.awpo.clone();

        let da_critic_estimate = if cfg.use_source && cfg.use_da {
            Some(self.domain_adaptation(&fresh)?)
        } else {
            None
        };

        let (inv_action_accuracy, inv_reward_mse) = if cfg.use_source {
            let (acc, mse) = self.train_inverse_models()?;
            (Some(acc), Some(mse))
        } else {
            (None, None)
        };

        let source_rolls = match &self.source {
            Some(src) if cfg.use_source => {
                let range = self
                    .buffer
                    .rollouts()
                    .flat_map(|r| r.rewards.iter().copied())
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
                self.tuples = estimate_source_tuples(
                    &self.models,
                    src,
                    cfg.reward_bonus,
                    range,
                    &mut self.rngs[ESTIMATE],
                )?;
                source_rollouts(src, &self.tuples)
            }
            _ => Vec::new(),
        };

        let target_samples = self.advantages(self.buffer.rollouts(), Part::EncT)?;
        let source_samples = self.advantages(source_rolls.iter(), Part::EncS)?;

        let value_or_q_loss = self.fit_critic(&target_samples, &source_samples)?;
        let (policy_loss, mean_weight, max_weight, kl_diag) = self.fit_policy(&target_samples, &source_samples)?;

        let metrics = IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            policy_loss,
            value_or_q_loss,
            da_critic_estimate,
            inv_action_accuracy,
            inv_reward_mse,
            mean_weight,
            max_weight,
            kl_diag,
        };
        let finite = [policy_loss, value_or_q_loss, mean_weight, kl_diag]
            .into_iter()
            .chain(da_critic_estimate)
            .chain(inv_action_accuracy)
            .chain(inv_reward_mse)
            .all(f64::is_finite);
        if !finite {
            return Err(Error::Numeric(format!("non-finite iteration metrics {metrics:?}")));
        }
        self.iteration += 1;
        self.last = Some(metrics.clone());
        Ok(metrics)
    }

    /// Collects one rollout batch, evaluating at every multiple of the
    /// evaluation interval that falls inside it. Returns the fresh frames.
    fn collect(&mut self) -> Result<Vec<FrameId>> {
        let Self {
            config,
            models,
            buffer,
            collector,
            eval_env,
            rngs,
            rows,
            last,
            started,
            env_steps,
            ..
        } = self;
        let base = *env_steps;
        let total = config.total_steps as u64;
        let interval = config.eval_interval as u64;
        let models = &*models;
        let rolls = collector.collect(models, &mut buffer.pool, config.awpo.rollout_len, &mut rngs[COLLECT], |taken, pool| {
            let step = base + taken as u64;
            if step % interval == 0 && step <= total {
                let (mean, std) = evaluate(models, eval_env, pool, config.eval_episodes)?;
                rows.push(MetricsRow {
                    env_steps: step,
                    eval_mean_reward: mean,
                    eval_std_reward: std,
                    train: last.clone(),
                    wall_seconds: if config.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
                });
            }
            Ok(())
        })?;
        *env_steps += config.awpo.rollout_len as u64;
        let mut fresh = Vec::with_capacity(config.awpo.rollout_len);
        for r in rolls {
            fresh.extend_from_slice(&r.frames[..r.len()]);
            buffer.push(r)?;
        }
        Ok(fresh)
    }

    fn domain_adaptation(&mut self, fresh: &[FrameId]) -> Result<f64> {
        let src = self.source.as_ref().expect("DA runs with source data");
        let da = &self.config.da;
        let mut estimate = 0.0;
        for _ in 0..da.generator_steps {
            let rng = &mut self.rngs[DA];
            let t_ids = pick(fresh, da.batch_size, rng);
            let s_ids = pick(&src.frame_ids, da.batch_size, rng);
            let diag = da_update(
                &mut self.models,
                &self.buffer.pool,
                &t_ids,
                &src.pool,
                &s_ids,
                da,
                &self.config.optim,
                rng,
                true,
            )?;
            estimate = diag.critic_estimate;
        }
        Ok(estimate)
    }

    /// Supervised inverse-model steps on standardized target transitions;
    /// returns the accuracy and reward error of the last minibatch before
    /// its step.
    fn train_inverse_models(&mut self) -> Result<(f64, f64)> {
        let transitions: Vec<Transition> = self
            .buffer
            .rollouts()
            .flat_map(|r| {
                (0..r.len()).map(move |t| Transition {
                    frame: r.frames[t],
                    next: r.frames[t + 1],
                    action: r.actions[t],
                    reward: r.rewards[t],
                })
            })
            .collect();
        let raw = embed_pool(&self.models, Part::EncT, &self.buffer.pool)?;
        let norm = EmbeddingNorm::fit(&raw)?;
        let cache = norm.apply_rows(&raw);
        let mut last = (0.0, 0.0);
        for _ in 0..self.config.awpo.inverse_updates {
            let batch = pick(&transitions, self.config.awpo.minibatch, &mut self.rngs[UPDATE]);
            let h = gather(&cache, &batch.iter().map(|t| t.frame).collect::<Vec<_>>())?;
            let hn = gather(&cache, &batch.iter().map(|t| t.next).collect::<Vec<_>>())?;
            let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
            let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
            let mut losses = inverse_losses(&self.models, &h, &hn, &actions, &rewards)?;
            last = (losses.accuracy, losses.reward_loss);
            inverse_step(&mut self.models, &mut losses, &self.config.optim)?;
        }
        Ok(last)
    }

    /// Advantages and critic targets for every transition of `rollouts`,
    /// embedded with `encoder`.
    fn advantages<'a>(&self, rollouts: impl Iterator<Item = &'a Rollout>, encoder: Part) -> Result<Vec<Sample>> {
        let rollouts: Vec<&Rollout> = rollouts.collect();
        if rollouts.is_empty() {
            return Ok(Vec::new());
        }
        let pool = match encoder {
            Part::EncT => &self.buffer.pool,
            _ => &self.source.as_ref().expect("source rollouts need source data").pool,
        };
        let cache = embed_pool(&self.models, encoder, pool)?;
        let ids: Vec<FrameId> = pool.ids().collect();
        let h = gather(&cache, &ids)?;
        let gamma = self.config.env.gamma;
        let cfg = &self.config.awpo;
        let mut out = Vec::new();
        match cfg.estimator {
            Estimator::Gae => {
                let v: Vec<f64> = self
                    .models
                    .net(Part::Value)
                    .forward(&h)?
                    .data
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                for r in rollouts {
                    let values: Vec<f64> = r.frames.iter().map(|&f| v[f as usize]).collect();
                    let bootstrap = if r.terminal { 0.0 } else { values[r.len()] };
                    let returns = mc_returns(&r.rewards, gamma, bootstrap);
                    let adv = gae(&r.rewards, &values, gamma, cfg.lambda_gae, r.terminal)?;
                    for t in 0..r.len() {
                        out.push(Sample {
                            frame: r.frames[t],
                            action: r.actions[t],
                            advantage: adv.advantages[t],
                            target: returns[t],
                        });
                    }
                }
            }
            Estimator::Pql => {
                let q = self.models.qvalue_target.forward(&h)?;
                let logits = self.models.net(Part::Policy).forward(&h)?;
                let to4 = |row: &[f32]| -> [f64; 4] { std::array::from_fn(|k| row[k] as f64) };
                let qs: Vec<[f64; 4]> = (0..ids.len()).map(|i| to4(q.row(i))).collect();
                let ps: Vec<[f64; 4]> = (0..ids.len()).map(|i| to4(&softmax(logits.row(i)))).collect();
                for r in rollouts {
                    let qr: Vec<[f64; 4]> = r.frames.iter().map(|&f| qs[f as usize]).collect();
                    let pr: Vec<[f64; 4]> = r.frames.iter().map(|&f| ps[f as usize]).collect();
                    let b = pql_targets(&r.rewards, &r.actions, &qr, &pr, gamma, cfg.lambda_pql, r.terminal)?;
                    for t in 0..r.len() {
                        out.push(Sample {
                            frame: r.frames[t],
                            action: r.actions[t],
                            advantage: b.advantages[t],
                            target: b.value_targets[t],
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Squared-error loss of the critic head on one origin's minibatch,
    /// back-propagated into the head and its encoder. Returns the loss.
    fn critic_half(&self, encoder: Part, batch: &[Sample], scale: f32, grads: &mut ModelGrads) -> Result<f64> {
        let pool = match encoder {
            Part::EncT => &self.buffer.pool,
            _ => &self.source.as_ref().expect("source samples need source data").pool,
        };
        let ids: Vec<FrameId> = batch.iter().map(|s| s.frame).collect();
        let emb = embed(&self.models, encoder, pool, &ids, Flow::Track)?;
        let head = match self.config.awpo.estimator {
            Estimator::Gae => Part::Value,
            Estimator::Pql => Part::QValue,
        };
        let net = self.models.net(head);
        let (out, tape) = net.forward_tape(&emb.rows)?;
        let width = out.row_len();
        let n = batch.len();
        let mut g = vec![0.0f32; out.data.len()];
        let mut loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let k = if width == 1 { 0 } else { s.action.index() };
            let err = out.data[i * width + k] as f64 - s.target;
            loss += err * err;
            g[i * width + k] = scale * (2.0 * err / n as f64) as f32;
        }
        let grad_rows = net
            .backward(&tape, &g, grads.get_mut(head), true)?
            .expect("input gradient requested");
        emb.backward(&self.models, &grad_rows, grads)?;
        Ok(loss / n as f64)
    }

    fn fit_critic(&mut self, target: &[Sample], source: &[Sample]) -> Result<f64> {
        let head = match self.config.awpo.estimator {
            Estimator::Gae => Part::Value,
            Estimator::Pql => Part::QValue,
        };
        let mb = self.config.awpo.minibatch;
        let with_source = !source.is_empty();
        let scale = if with_source { 0.5 } else { 1.0 };
        let mut total = 0.0;
        let updates = self.config.awpo.critic_updates;
        for _ in 0..updates {
            let tb = pick(target, mb, &mut self.rngs[UPDATE]);
            let sb = if with_source { pick(source, mb, &mut self.rngs[UPDATE]) } else { Vec::new() };
            let mut grads = ModelGrads::zeros(&self.models);
            let mut loss = scale as f64 * self.critic_half(Part::EncT, &tb, scale, &mut grads)?;
            if with_source {
                loss += scale as f64 * self.critic_half(Part::EncS, &sb, scale, &mut grads)?;
            }
            let lr = self.config.optim.lr;
            if with_source {
                self.models.step(&[Part::EncT, head], &mut grads, &self.config.optim, lr)?;
                let scale = self.config.awpo.source_encoder_lr_scale;
                if scale > 0.0 {
                    self.models.step(&[Part::EncS], &mut grads, &self.config.optim, lr * scale)?;
                }
            } else {
                self.models.step(&[Part::EncT, head], &mut grads, &self.config.optim, lr)?;
            }
            if head == Part::QValue {
                self.models.polyak_update_qvalue(self.config.awpo.tau as f32);
            }
            total += loss;
        }
        Ok(if updates == 0 { 0.0 } else { total / updates as f64 })
    }

    /// Returns the mean loss, mean and max weight, and the policy KL
    /// between the start and the end of the phase over target frames.
    fn fit_policy(&mut self, target: &[Sample], source: &[Sample]) -> Result<(f64, f64, f64, f64)> {
        let cache_t = embed_pool(&self.models, Part::EncT, &self.buffer.pool)?;
        let cache_s = match &self.source {
            Some(src) if !source.is_empty() => embed_pool(&self.models, Part::EncS, &src.pool)?,
            _ => Vec::new(),
        };
        let old = self.models.net(Part::Policy).clone();
        let cfg = self.config.awpo.clone();
        let (mut loss_sum, mut w_sum, mut w_max, mut w_count) = (0.0, 0.0, 0.0f64, 0usize);
        for _ in 0..cfg.policy_updates {
            let mut batch = pick(target, cfg.minibatch, &mut self.rngs[UPDATE]);
            let n_t = batch.len();
            if !source.is_empty() {
                batch.extend(pick(source, cfg.minibatch, &mut self.rngs[UPDATE]));
            }
            let ids_t: Vec<FrameId> = batch[..n_t].iter().map(|s| s.frame).collect();
            let mut h = gather(&cache_t, &ids_t)?;
            if batch.len() > n_t {
                let ids_s: Vec<FrameId> = batch[n_t..].iter().map(|s| s.frame).collect();
                h = stack(&h, &gather(&cache_s, &ids_s)?)?;
            }
            let adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
            let w = awpo_weights(&adv, cfg.temperature, cfg.weight_cap, cfg.standardize_advantages)?;
            let actions: Vec<Action> = batch.iter().map(|s| s.action).collect();
            let (loss, g) = policy_loss(self.models.net(Part::Policy), &h, &actions, &w)?;
            let mut grads = ModelGrads::zeros(&self.models);
            grads.get_mut(Part::Policy).copy_from_slice(&g);
            let lr = self.config.optim.lr;
            self.models.step(&[Part::Policy], &mut grads, &self.config.optim, lr)?;
            loss_sum += loss;
            w_sum += w.iter().sum::<f64>();
            w_max = w.iter().copied().fold(w_max, f64::max);
            w_count += w.len();
        }
        let updates = cfg.policy_updates.max(1) as f64;
        let ids: Vec<FrameId> = self.buffer.pool.ids().collect();
        let kl = diagnostic_kl(&old, self.models.net(Part::Policy), &gather(&cache_t, &ids)?, KlDirection::OldToNew)?;
        let mean_w = if w_count == 0 { 0.0 } else { w_sum / w_count as f64 };
        Ok((loss_sum / updates, mean_w, w_max, kl))
    }
}

/// Result of a full run.
pub struct TrainingOutcome {
    pub models: ModelSet,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("iter_{iteration:05}.awck"))
}

/// Runs every iteration of `config`. With `out_dir`, writes `metrics.csv`
/// and checkpoints there.
pub fn run_training(config: &RunConfig, source: Option<&FrameDataset>, out_dir: Option<&Path>) -> Result<TrainingOutcome> {
    let mut trainer = Trainer::new(config.clone(), source)?;
    let k = config.iterations();
    if let Some(dir) = out_dir {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    if k > 0 {
        trainer.evaluate_now()?;
    }
    let mut checkpoints = Vec::new();
    for it in 0..k {
        trainer.train_iteration()?;
        let last = it + 1 == k;
        if let Some(dir) = out_dir {
            if last || (it + 1) % config.checkpoint_interval == 0 {
                let path = checkpoint_path(dir, trainer.iteration);
                save_checkpoint(&trainer.checkpoint(), &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        write_metrics(&trainer.rows, dir.join("metrics.csv"))?;
    }
    Ok(TrainingOutcome {
        models: trainer.models,
        rows: trainer.rows,
        checkpoints,
    })
}
