//! From observation-only videos to usable demonstrations: adversarial
//! alignment of the source encoder with the target embedding space, and
//! inverse models that label source frame pairs with actions and rewards.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::DaConfig;
use crate::dataset::{FrameDataset, ObservationPairSet};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::features::{embed, embed_pool, FrameId, FramePool};
use crate::nn::{
    adam_step, silu, silu_grad, silu_grad2, Flow, Layer, ModelGrads, ModelSet, Net, OptimConfig, Part,
    Scalar, Tensor,
};
use crate::nn::softmax;
use crate::policy_eval::{Origin, Rollout};

/// Output of the Wasserstein domain loss
/// `mean_i disc(h_T[i]) - mean_i disc(h_S[i])` and its gradients.
#[derive(Debug, Clone)]
pub struct DaLoss<T> {
    pub loss: f64,
    pub disc_grads: Vec<T>,
    pub grad_target: Vec<T>,
    pub grad_source: Vec<T>,
}

pub fn da_loss<T: Scalar>(disc: &Net<T>, h_target: &Tensor<T>, h_source: &Tensor<T>) -> Result<DaLoss<T>> {
    if h_target.shape != h_source.shape {
        return Err(Error::shape(format!("{:?}", h_target.shape), format!("{:?}", h_source.shape)));
    }
    let m = h_target.batch();
    if m == 0 {
        return Err(Error::shape("non-empty batches", "0 rows"));
    }
    let (dt, tape_t) = disc.forward_tape(h_target)?;
    let (ds, tape_s) = disc.forward_tape(h_source)?;
    let mean = |v: &[T]| v.iter().map(|x| Scalar::to_f64(*x)).sum::<f64>() / m as f64;
    let loss = mean(&dt.data) - mean(&ds.data);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("domain loss is {loss}")));
    }
    let inv = T::from_f64(1.0 / m as f64);
    let mut disc_grads = vec![T::zero(); disc.params.len()];
    let grad_target = disc
        .backward(&tape_t, &vec![inv; m], &mut disc_grads, true)?
        .expect("input gradient requested");
    let grad_source = disc
        .backward(&tape_s, &vec![-inv; m], &mut disc_grads, true)?
        .expect("input gradient requested");
    Ok(DaLoss {
        loss,
        disc_grads,
        grad_target,
        grad_source,
    })
}

/// Mean over rows of `(‖∇_h disc(h)‖ - 1)²` and its gradient with respect
/// to the critic's parameters. Supports a single linear layer or the
/// `Linear -> SiLU -> Linear` head.
pub fn gradient_penalty<T: Scalar>(disc: &Net<T>, points: &Tensor<T>) -> Result<(f64, Vec<T>)> {
    let n = points.batch();
    let d = points.row_len();
    let mut grads = vec![T::zero(); disc.params.len()];
    if n == 0 {
        return Ok((0.0, grads));
    }
    let scale = T::from_f64(1.0 / n as f64);
    let two = T::one() + T::one();
    let layers = &disc.arch.layers;
    let mut total = 0.0;
    match layers.as_slice() {
        [Layer::Linear { inputs, outputs: 1 }] if *inputs == d => {
            let w = &disc.params[..d];
            let norm = w.iter().map(|&x| x * x).sum::<T>().sqrt();
            let pen = (norm - T::one()) * (norm - T::one());
            total = Scalar::to_f64(pen);
            if norm > T::zero() {
                let c = two * (norm - T::one()) / norm;
                for j in 0..d {
                    grads[j] = c * w[j];
                }
            }
        }
        [Layer::Linear { inputs, outputs: hidden }, Layer::Silu { .. }, Layer::Linear { outputs: 1, .. }]
            if *inputs == d =>
        {
            let hdim = *hidden;
            let w1 = &disc.params[..hdim * d];
            let b1 = &disc.params[hdim * d..hdim * d + hdim];
            let off2 = disc.arch.offset(2);
            let w2 = &disc.params[off2..off2 + hdim];
            let mut u = vec![T::zero(); hdim];
            let mut s1 = vec![T::zero(); hdim];
            let mut s2 = vec![T::zero(); hdim];
            let mut g = vec![T::zero(); d];
            let mut e = vec![T::zero(); hdim];
            for row in 0..n {
                let h = points.row(row);
                for k in 0..hdim {
                    let z = b1[k] + (0..d).map(|j| w1[k * d + j] * h[j]).sum::<T>();
                    s1[k] = silu_grad(z);
                    s2[k] = silu_grad2(z);
                    u[k] = w2[k] * s1[k];
                }
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = (0..hdim).map(|k| w1[k * d + j] * u[k]).sum();
                }
                let norm = g.iter().map(|&x| x * x).sum::<T>().sqrt();
                total += Scalar::to_f64((norm - T::one()) * (norm - T::one()));
                if norm == T::zero() {
                    continue;
                }
                // c = dP/dg
                let cf = two * (norm - T::one()) / norm * scale;
                let c: Vec<T> = g.iter().map(|&x| cf * x).collect();
                for k in 0..hdim {
                    e[k] = (0..d).map(|j| w1[k * d + j] * c[j]).sum();
                }
                for k in 0..hdim {
                    let dz = e[k] * w2[k] * s2[k];
                    for j in 0..d {
                        grads[k * d + j] += u[k] * c[j] + dz * h[j];
                    }
                    grads[hdim * d + k] += dz;
                    grads[off2 + k] += e[k] * s1[k];
                }
            }
            total /= n as f64;
        }
        _ => {
            return Err(Error::Config(
                "gradient penalty supports a linear or one-hidden-layer SiLU critic".into(),
            ))
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("gradient penalty is {total}")));
    }
    Ok((total, grads))
}

/// Scalar critic output for one embedding, used by tests and probes.
pub fn disc_value<T: Scalar>(disc: &Net<T>, h: &[T]) -> Result<T> {
    let x = Tensor::matrix(1, h.len(), h.to_vec())?;
    Ok(disc.forward(&x)?.data[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaDiagnostics {
    /// Domain loss on the update batches before any step.
    pub critic_before: f64,
    /// Domain loss on the same batches after the source-encoder step.
    pub critic_estimate: f64,
    /// Gradient penalty at the last critic step.
    pub penalty: f64,
}

/// Critic estimate of the embedding distance between two frame batches
/// under the current models; no gradients.
pub fn critic_estimate(
    models: &ModelSet,
    target_pool: &FramePool,
    target_ids: &[FrameId],
    source_pool: &FramePool,
    source_ids: &[FrameId],
) -> Result<f64> {
    let ht = embed(models, Part::EncT, target_pool, target_ids, Flow::Stop)?;
    let hs = embed(models, Part::EncS, source_pool, source_ids, Flow::Stop)?;
    Ok(da_loss(models.net(Part::Disc), &ht.rows, &hs.rows)?.loss)
}

/// `n_critic` penalized ascent steps on the critic, then one descent step of
/// the domain loss on the source encoder. The target encoder is read with a
/// stop-gradient and never changes.
#[allow(clippy::too_many_arguments)]
pub fn da_update<R: Rng + ?Sized>(
    models: &mut ModelSet,
    target_pool: &FramePool,
    target_ids: &[FrameId],
    source_pool: &FramePool,
    source_ids: &[FrameId],
    cfg: &DaConfig,
    optim: &OptimConfig,
    rng: &mut R,
    update_generator: bool,
) -> Result<DaDiagnostics> {
    if target_ids.is_empty() || target_ids.len() != source_ids.len() {
        return Err(Error::shape(
            format!("equal non-empty batches ({} target frames)", target_ids.len()),
            format!("{} source frames", source_ids.len()),
        ));
    }
    let lr = optim.lr * cfg.lr_scale;
    let ht = embed(models, Part::EncT, target_pool, target_ids, Flow::Stop)?;
    let hs_fixed = embed(models, Part::EncS, source_pool, source_ids, Flow::Stop)?;
    let m = target_ids.len();
    let d = ht.rows.row_len();

    let critic_before = da_loss(models.net(Part::Disc), &ht.rows, &hs_fixed.rows)?.loss;
    let mut penalty = 0.0;
    for _ in 0..cfg.n_critic {
        let disc = models.net(Part::Disc);
        let dl = da_loss(disc, &ht.rows, &hs_fixed.rows)?;
        let mut mix = Vec::with_capacity(m * d);
        for i in 0..m {
            let eps: f32 = rng.gen();
            let (a, b) = (ht.rows.row(i), hs_fixed.rows.row(i));
            mix.extend(a.iter().zip(b).map(|(&x, &y)| eps * x + (1.0 - eps) * y));
        }
        let (pen, pen_grads) = gradient_penalty(disc, &Tensor::matrix(m, d, mix)?)?;
        penalty = pen;
        // Descend -(loss - gp * penalty).
        let gp = cfg.gp_coeff as f32;
        let mut g: Vec<f32> = dl
            .disc_grads
            .iter()
            .zip(&pen_grads)
            .map(|(&a, &p)| -a + gp * p)
            .collect();
        let ModelSet { nets, optim: states, .. } = models;
        adam_step(
            optim,
            lr,
            &mut [&mut nets[Part::Disc as usize].params],
            &mut [&mut g],
            &mut [&mut states[Part::Disc as usize]],
        )?;
    }

    if update_generator {
        let hs = embed(models, Part::EncS, source_pool, source_ids, Flow::Track)?;
        let dl = da_loss(models.net(Part::Disc), &ht.rows, &hs.rows)?;
        let mut grads = ModelGrads::zeros(models);
        hs.backward(models, &dl.grad_source, &mut grads)?;
        let ModelSet { nets, optim: states, .. } = models;
        adam_step(
            optim,
            optim.lr * cfg.generator_lr_scale,
            &mut [&mut nets[Part::EncS as usize].params],
            &mut [grads.get_mut(Part::EncS)],
            &mut [&mut states[Part::EncS as usize]],
        )?;
    }

    let critic_estimate = critic_estimate(models, target_pool, target_ids, source_pool, source_ids)?;
    Ok(DaDiagnostics {
        critic_before,
        critic_estimate,
        penalty,
    })
}

/// Per-dimension standardization of embeddings ahead of the inverse
/// models. Frames differ mostly in a small agent glyph, so raw embeddings
/// vary little around a large shared offset and the heads fit slowly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNorm {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl EmbeddingNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    /// Statistics of `rows`, each distinct frame counted once.
    pub fn fit(rows: &[Vec<f32>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("at least one embedding", "0 rows"));
        };
        let (d, n) = (first.len(), rows.len() as f64);
        let mut mean = vec![0.0f64; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x as f64 / n);
        }
        let mut var = vec![0.0f64; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((v, &x), m)| *v += (x as f64 - m).powi(2) / n);
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var.iter().map(|&v| (1.0 / v.sqrt().max(1e-6)) as f32).collect(),
        })
    }

    pub fn apply_row(&self, row: &[f32]) -> Vec<f32> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect()
    }

    pub fn apply_rows(&self, rows: &[Vec<f32>]) -> Vec<Vec<f32>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

/// Supervised inverse-model losses on detached embedding pairs.
#[derive(Debug, Clone)]
pub struct InverseLosses {
    /// Mean over the batch of `‖onehot(a) - softmax(logits)‖²`.
    pub action_loss: f64,
    /// Mean squared reward error.
    pub reward_loss: f64,
    /// Fraction of rows whose arg-max action is the taken one.
    pub accuracy: f64,
    pub action_grads: Vec<f32>,
    pub reward_grads: Vec<f32>,
}

pub fn inverse_losses(
    models: &ModelSet,
    h: &Tensor<f32>,
    h_next: &Tensor<f32>,
    actions: &[Action],
    rewards: &[f64],
) -> Result<InverseLosses> {
    let n = h.batch();
    if h_next.shape != h.shape || actions.len() != n || rewards.len() != n || n == 0 {
        return Err(Error::shape(
            format!("{n} matching rows"),
            format!("{:?} / {} actions / {} rewards", h_next.shape, actions.len(), rewards.len()),
        ));
    }
    let pair = Tensor::concat_features(h, h_next)?;
    let act_net = models.net(Part::InvAction);
    let rew_net = models.net(Part::InvReward);
    let (logits, tape_a) = act_net.forward_tape(&pair)?;
    let (pred, tape_r) = rew_net.forward_tape(&pair)?;

    let mut action_loss = 0.0;
    let mut correct = 0usize;
    let mut g_logits = vec![0.0f32; n * Action::COUNT];
    for i in 0..n {
        let p = softmax(logits.row(i));
        let target = actions[i].index();
        let mut gp = [0.0f32; 4];
        for k in 0..Action::COUNT {
            let y = if k == target { 1.0 } else { 0.0 };
            action_loss += ((y - p[k]) as f64).powi(2);
            gp[k] = 2.0 * (p[k] - y) / n as f32;
        }
        let dot: f32 = (0..4).map(|k| gp[k] * p[k]).sum();
        for j in 0..4 {
            g_logits[i * 4 + j] = p[j] * (gp[j] - dot);
        }
        let best = (0..4).fold(0, |b, k| if logits.row(i)[k] > logits.row(i)[b] { k } else { b });
        correct += (best == target) as usize;
    }
    action_loss /= n as f64;

    let mut reward_loss = 0.0;
    let mut g_pred = vec![0.0f32; n];
    for i in 0..n {
        let err = rewards[i] - pred.data[i] as f64;
        reward_loss += err * err;
        g_pred[i] = (-2.0 * err / n as f64) as f32;
    }
    reward_loss /= n as f64;
    if !action_loss.is_finite() || !reward_loss.is_finite() {
        return Err(Error::Numeric("inverse-model loss is not finite".into()));
    }

    let mut action_grads = vec![0.0; act_net.params.len()];
    act_net.backward(&tape_a, &g_logits, &mut action_grads, false)?;
    let mut reward_grads = vec![0.0; rew_net.params.len()];
    rew_net.backward(&tape_r, &g_pred, &mut reward_grads, false)?;
    Ok(InverseLosses {
        action_loss,
        reward_loss,
        accuracy: correct as f64 / n as f64,
        action_grads,
        reward_grads,
    })
}

/// Applies one optimizer step to both inverse models.
pub fn inverse_step(models: &mut ModelSet, losses: &mut InverseLosses, optim: &OptimConfig) -> Result<()> {
    let ModelSet { nets, optim: states, .. } = models;
    let (a, r) = (Part::InvAction as usize, Part::InvReward as usize);
    let (lo, hi) = nets.split_at_mut(r);
    let (slo, shi) = states.split_at_mut(r);
    adam_step(optim, optim.lr, &mut [&mut lo[a].params], &mut [&mut losses.action_grads], &mut [&mut slo[a]])?;
    adam_step(optim, optim.lr, &mut [&mut hi[0].params], &mut [&mut losses.reward_grads], &mut [&mut shi[0]])?;
    Ok(())
}

/// A labelled source transition. `frame`/`next_frame` index the source pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedTuple {
    pub pair: (usize, usize),
    pub frame: FrameId,
    pub next_frame: FrameId,
    pub h: Vec<f32>,
    pub h_next: Vec<f32>,
    pub action: Action,
    /// Inverse reward model output, clamped, before the bonus.
    pub raw_reward: f64,
    pub reward: f64,
    pub origin: Origin,
}

/// Source frames interned for training, with their pair and rollout layout.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub pool: FramePool,
    /// Pool id of every dataset frame.
    pub frame_ids: Vec<FrameId>,
    pub pairs: ObservationPairSet,
    /// Pair-index ranges forming rollouts, with their terminal flags.
    pub spans: Vec<(std::ops::Range<usize>, bool)>,
}

impl SourceData {
    /// Episodes become rollouts; an episode followed by another one ended
    /// in a terminal state. The final episode and all external footage are
    /// treated as cut, and split into chunks of `chunk_len` transitions.
    pub fn from_dataset(ds: &FrameDataset, chunk_len: usize) -> Result<Self> {
        let pairs = ds.make_pairs()?;
        let mut pool = FramePool::new();
        let frame_ids = ds.frames.iter().map(|f| pool.intern(f)).collect();
        let episodes = ds.episodes();
        let mut spans = Vec::new();
        let mut start = 0usize;
        for (e, ep) in episodes.iter().enumerate() {
            let n = ep.len().saturating_sub(1);
            if n == 0 {
                continue;
            }
            let last_episode = e + 1 == episodes.len();
            let mut s = start;
            while s < start + n {
                let end = s.saturating_add(chunk_len).min(start + n);
                let terminal = !last_episode && end == start + n;
                spans.push((s..end, terminal));
                s = end;
            }
            start += n;
        }
        debug_assert_eq!(start, pairs.len());
        Ok(Self {
            pool,
            frame_ids,
            pairs,
            spans,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Embeds every source pair with the source encoder, standardizes with
/// the source pool's own statistics (the inverse models train on target
/// embeddings standardized the same way), samples an action from the
/// inverse action model and sets `reward = inverse reward + bonus`.
/// The inverse reward is clamped to `reward_range`, the rewards observed in
/// the target domain; the reward head is queried off its training
/// distribution here, and unclamped outputs feed back through the value
/// loss into the source encoder.
pub fn estimate_source_tuples<R: Rng + ?Sized>(
    models: &ModelSet,
    source: &SourceData,
    bonus: f64,
    reward_range: (f64, f64),
    rng: &mut R,
) -> Result<Vec<EstimatedTuple>> {
    if source.pairs.is_empty() {
        return Ok(Vec::new());
    }
    let cache = embed_pool(models, Part::EncS, &source.pool)?;
    let normed = EmbeddingNorm::fit(&cache)?.apply_rows(&cache);
    let d = models.arch.embed_dim;
    let n = source.pairs.len();
    let mut pair_rows = Vec::with_capacity(n * 2 * d);
    for &(i, j) in &source.pairs.pairs {
        pair_rows.extend_from_slice(&normed[source.frame_ids[i] as usize]);
        pair_rows.extend_from_slice(&normed[source.frame_ids[j] as usize]);
    }
    let x = Tensor::matrix(n, 2 * d, pair_rows)?;
    let logits = models.net(Part::InvAction).forward(&x)?;
    let rewards = models.net(Part::InvReward).forward(&x)?;
    let mut out = Vec::with_capacity(n);
    for (k, &(i, j)) in source.pairs.pairs.iter().enumerate() {
        let p = softmax(logits.row(k));
        let u: f32 = rng.gen();
        let mut acc = 0.0;
        let mut action = Action::ALL[Action::COUNT - 1];
        for (a, &pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                action = Action::ALL[a];
                break;
            }
        }
        let raw = (rewards.data[k] as f64).clamp(reward_range.0, reward_range.1);
        let (fi, fj) = (source.frame_ids[i], source.frame_ids[j]);
        out.push(EstimatedTuple {
            pair: (i, j),
            frame: fi,
            next_frame: fj,
            h: cache[fi as usize].clone(),
            h_next: cache[fj as usize].clone(),
            action,
            raw_reward: raw,
            reward: raw + bonus,
            origin: Origin::Source,
        });
    }
    Ok(out)
}

/// Groups estimated tuples into rollouts along `source.spans`.
pub fn source_rollouts(source: &SourceData, tuples: &[EstimatedTuple]) -> Vec<Rollout> {
    source
        .spans
        .iter()
        .map(|(span, terminal)| {
            let ts = &tuples[span.clone()];
            let mut frames: Vec<FrameId> = ts.iter().map(|t| t.frame).collect();
            frames.push(ts.last().expect("spans are non-empty").next_frame);
            Rollout {
                frames,
                actions: ts.iter().map(|t| t.action).collect(),
                rewards: ts.iter().map(|t| t.reward).collect(),
                terminal: *terminal,
                origin: Origin::Source,
            }
        })
        .collect()
}

pub const TUPLE_MAGIC: &[u8; 4] = b"ESTD";

/// Writes estimated tuples for offline inspection:
/// `"ESTD" | u32 version=1 | u32 count | u16 d | (u32 i, u32 j, u8 action,
/// f64 raw reward, f64 reward, f32 h[d], f32 h'[d])*`, little-endian.
pub fn save_tuples(tuples: &[EstimatedTuple], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = tuples.first().map_or(0, |t| t.h.len());
    let mut out = Vec::new();
    out.extend_from_slice(TUPLE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(tuples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u16).to_le_bytes());
    for t in tuples {
        out.extend_from_slice(&(t.pair.0 as u32).to_le_bytes());
        out.extend_from_slice(&(t.pair.1 as u32).to_le_bytes());
        out.push(t.action.index() as u8);
        out.extend_from_slice(&t.raw_reward.to_le_bytes());
        out.extend_from_slice(&t.reward.to_le_bytes());
        for v in t.h.iter().chain(&t.h_next) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reference SiLU critic value for hand checks.
#[doc(hidden)]
pub fn silu_mlp_value(w1: &[f64], b1: &[f64], w2: &[f64], b2: f64, h: &[f64]) -> f64 {
    let d = h.len();
    (0..b1.len())
        .map(|k| {
            let z = b1[k] + (0..d).map(|j| w1[k * d + j] * h[j]).sum::<f64>();
            w2[k] * silu(z)
        })
        .sum::<f64>()
        + b2
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataset::generate_source_video;
    use crate::env::{GridConfig, Theme};
    use crate::nn::{Arch, ArchConfig};

    fn linear_sum_critic(d: usize) -> Net<f64> {
        let arch = Arch::new(vec![d], vec![Layer::Linear { inputs: d, outputs: 1 }]).unwrap();
        let mut params = vec![1.0; d];
        params.push(0.0);
        Net {
            arch: Arc::new(arch),
            params,
        }
    }

    #[test]
    fn domain_loss_hand_cases() {
        let disc = linear_sum_critic(2);
        let ht = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let hs = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(da_loss(&disc, &ht, &hs).unwrap().loss, 1.0);
        assert_eq!(da_loss(&disc, &ht, &ht).unwrap().loss, 0.0);
        let bad = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(da_loss(&disc, &ht, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn swapping_batches_negates_the_loss() {
        let models = ModelSet::init(&ArchConfig::default(), 4).unwrap();
        let disc: Net<f64> = models.net(Part::Disc).cast();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_batch = || {
            Tensor::matrix(5, 64, (0..320).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (a, b) = (rand_batch(), rand_batch());
        let ab = da_loss(&disc, &a, &b).unwrap().loss;
        let ba = da_loss(&disc, &b, &a).unwrap().loss;
        assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let arch = Arch::new(vec![3], vec![Layer::Linear { inputs: 3, outputs: 1 }]).unwrap();
        let disc = Net {
            arch: Arc::new(arch),
            params: vec![0.6, 0.0, 0.8, 0.3],
        };
        let pts = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (pen, grads) = gradient_penalty(&disc, &pts).unwrap();
        assert!(pen.abs() < 1e-15);
        assert!(grads.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let arch = ArchConfig {
            embed_dim: 6,
            hidden: 5,
            ..ArchConfig::default()
        };
        let models = ModelSet::init(&arch, 8).unwrap();
        let mut disc: Net<f64> = models.net(Part::Disc).cast();
        // Larger output weights push the input gradient norm away from 1.
        let off = disc.arch.offset(2);
        for v in &mut disc.params[off..off + 5] {
            *v *= 7.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = Tensor::matrix(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (pen, grads) = gradient_penalty(&disc, &pts).unwrap();
        assert!(pen > 1e-3);

        // Penalty recomputed from numerically differentiated critic values.
        let penalty_fd = |net: &Net<f64>| {
            let hdim = 5;
            let d = 6;
            let w1 = &net.params[..hdim * d];
            let b1 = &net.params[hdim * d..hdim * d + hdim];
            let w2 = &net.params[off..off + hdim];
            let b2 = net.params[off + hdim];
            let mut total = 0.0;
            for r in 0..3 {
                let h = pts.row(r);
                let mut g2 = 0.0;
                for j in 0..d {
                    let step = 1e-5;
                    let mut up = h.to_vec();
                    let mut dn = h.to_vec();
                    up[j] += step;
                    dn[j] -= step;
                    let gj = (silu_mlp_value(w1, b1, w2, b2, &up) - silu_mlp_value(w1, b1, w2, b2, &dn))
                        / (2.0 * step);
                    g2 += gj * gj;
                }
                total += (g2.sqrt() - 1.0).powi(2);
            }
            total / 3.0
        };
        assert!((penalty_fd(&disc) - pen).abs() < 1e-8);
        let mut worst: f64 = 0.0;
        for i in 0..disc.params.len() {
            let h = 1e-4;
            let mut up = disc.clone();
            up.params[i] += h;
            let mut dn = disc.clone();
            dn.params[i] -= h;
            let (pu, _) = gradient_penalty(&up, &pts).unwrap();
            let (pd, _) = gradient_penalty(&dn, &pts).unwrap();
            let num = (pu - pd) / (2.0 * h);
            let err = (num - grads[i]).abs() / num.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn inverse_losses_hand_cases() {
        let arch = ArchConfig {
            embed_dim: 4,
            hidden: 3,
            ..ArchConfig::default()
        };
        let mut models = ModelSet::init(&arch, 0).unwrap();
        // Zero output layers: uniform action probabilities, zero reward.
        for part in [Part::InvAction, Part::InvReward] {
            let net = models.net_mut(part);
            let off = net.arch.offset(2);
            net.params[off..].iter_mut().for_each(|v| *v = 0.0);
        }
        let h = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let l = inverse_losses(&models, &h, &h, &[Action::North, Action::West], &[0.0, 0.0]).unwrap();
        assert!((l.action_loss - 0.75).abs() < 1e-6);
        assert_eq!(l.reward_loss, 0.0);
    }

    #[test]
    fn estimated_rewards_carry_the_bonus() {
        let arch = ArchConfig {
            obs_height: 20,
            obs_width: 20,
            embed_dim: 8,
            hidden: 8,
            convs: vec![(4, 5, 2), (4, 3, 2)],
            copy_target_encoder_init: true,
        };
        let mut models = ModelSet::init(&arch, 0).unwrap();
        let net = models.net_mut(Part::InvReward);
        let off = net.arch.offset(2);
        net.params[off..].iter_mut().for_each(|v| *v = 0.0);
        let cfg = GridConfig {
            obs_height: 20,
            obs_width: 20,
            ..GridConfig::default().with_theme(Theme::SourceVariant)
        };
        let ds = generate_source_video(&cfg, 0.3, 60, 1).unwrap().dataset;
        let source = SourceData::from_dataset(&ds, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tuples = estimate_source_tuples(&models, &source, 0.01, (-1.0, 1.0), &mut rng).unwrap();
        assert_eq!(tuples.len(), source.num_pairs());
        assert!(tuples.iter().all(|t| t.raw_reward == 0.0 && t.reward == 0.01));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let again = estimate_source_tuples(&models, &source, 0.01, (-1.0, 1.0), &mut rng).unwrap();
        assert_eq!(tuples, again);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clamped = estimate_source_tuples(&models, &source, 0.01, (0.25, 0.5), &mut rng).unwrap();
        assert!(clamped.iter().all(|t| t.raw_reward == 0.25 && t.reward == 0.26));

        let rollouts = source_rollouts(&source, &tuples);
        assert_eq!(rollouts.iter().map(Rollout::len).sum::<usize>(), tuples.len());
        assert!(rollouts.iter().all(|r| r.check().is_ok() && r.len() <= 16));
        assert!(!rollouts.last().unwrap().terminal);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuples.estd");
        save_tuples(&tuples, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], TUPLE_MAGIC);
        assert_eq!(bytes.len(), 14 + tuples.len() * (9 + 16 + 2 * 8 * 4));
    }
}
