use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, Arch, Layer, Net, OptimConfig};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};

/// Network dimensions shared by every model in a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub obs_height: usize,
    pub obs_width: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// `(out_channels, kernel, stride)` per convolution.
    pub convs: Vec<(usize, usize, usize)>,
    /// Start the source encoder from a copy of the target encoder's initial
    /// weights. The two never share storage afterwards.
    pub copy_target_encoder_init: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            obs_height: 64,
            obs_width: 64,
            embed_dim: 64,
            hidden: 128,
            convs: vec![(16, 5, 2), (32, 3, 2), (32, 3, 2)],
            copy_target_encoder_init: true,
        }
    }
}

impl ArchConfig {
    pub fn encoder_arch(&self) -> Result<Arch> {
        Arch::conv_encoder(
            Observation::CHANNELS,
            self.obs_height,
            self.obs_width,
            &self.convs,
            self.embed_dim,
        )
    }

    pub fn head_arch(&self, part: Part) -> Result<Arch> {
        let d = self.embed_dim;
        let (inputs, outputs) = match part {
            Part::EncT | Part::EncS => return self.encoder_arch(),
            Part::Policy | Part::QValue => (d, Action::COUNT),
            Part::Value | Part::Disc => (d, 1),
            Part::InvAction => (2 * d, Action::COUNT),
            Part::InvReward => (2 * d, 1),
        };
        Arch::mlp(inputs, self.hidden, outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.convs.is_empty() {
            return Err(Error::Config("ArchConfig dimensions must be positive".into()));
        }
        self.encoder_arch().map(|_| ())
    }
}

/// The trainable function approximators of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    EncT = 0,
    EncS = 1,
    Policy = 2,
    Value = 3,
    QValue = 4,
    Disc = 5,
    InvAction = 6,
    InvReward = 7,
}

pub const ALL_PARTS: [Part; 8] = [
    Part::EncT,
    Part::EncS,
    Part::Policy,
    Part::Value,
    Part::QValue,
    Part::Disc,
    Part::InvAction,
    Part::InvReward,
];

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::EncT => "enc_T",
            Part::EncS => "enc_S",
            Part::Policy => "policy",
            Part::Value => "value",
            Part::QValue => "qvalue",
            Part::Disc => "disc",
            Part::InvAction => "inv_action",
            Part::InvReward => "inv_reward",
        }
    }

    pub fn from_name(name: &str) -> Option<Part> {
        ALL_PARTS.into_iter().find(|p| p.name() == name)
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Part::EncT | Part::EncS)
    }
}

/// Whether a consumer of an intermediate lets gradients through to the
/// parameters that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Track,
    Stop,
}

/// All networks plus per-network optimizer state. `qvalue_target` is the
/// Polyak-averaged copy of `qvalue` used for bootstrapping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub arch: ArchConfig,
    pub nets: Vec<Net<f32>>,
    pub qvalue_target: Net<f32>,
    pub optim: Vec<AdamState>,
}

fn init_net(arch: Arch, rng: &mut ChaCha8Rng, output_scale: f32) -> Net<f32> {
    let n_layers = arch.layers.len();
    let mut net = Net::zeros(Arc::new(arch));
    let arch = net.arch.clone();
    let last_param_layer = arch
        .layers
        .iter()
        .rposition(|l| l.num_params() > 0)
        .unwrap_or(0);
    for li in 0..n_layers {
        let layer: &Layer = &arch.layers[li];
        if layer.num_params() == 0 {
            continue;
        }
        let fan = layer.fan_in() as f32;
        let last = li == last_param_layer;
        // He-uniform ahead of a nonlinearity keeps the agent glyph visible in
        // the embedding; a plain 1/sqrt(fan_in) bound shrinks it per layer.
        let bound = if last { 1.0 / fan.sqrt() } else { (6.0 / fan).sqrt() };
        let scale = if last { output_scale } else { 1.0 };
        let off = arch.offset(li);
        let weights = layer.param_blocks()[0];
        for v in &mut net.params[off..off + weights] {
            *v = rng.gen_range(-bound..bound) * scale;
        }
    }
    net
}

impl ModelSet {
    /// Deterministic initialization: zero biases, weights uniform in
    /// `±sqrt(6/fan_in)` for hidden layers and `±1/sqrt(fan_in)` for each
    /// output layer, the policy's output shrunk so the initial policy is
    /// close to uniform.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut nets = Vec::with_capacity(ALL_PARTS.len());
        for part in ALL_PARTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(part as u64 + 1);
            let scale = if part == Part::Policy { 0.01 } else { 1.0 };
            nets.push(init_net(arch.head_arch(part)?, &mut rng, scale));
        }
        if arch.copy_target_encoder_init {
            nets[Part::EncS as usize].params = nets[Part::EncT as usize].params.clone();
        }
        let qvalue_target = nets[Part::QValue as usize].clone();
        let optim = nets.iter().map(|n| AdamState::new(n.params.len())).collect();
        Ok(Self {
            arch: arch.clone(),
            nets,
            qvalue_target,
            optim,
        })
    }

    pub fn net(&self, part: Part) -> &Net<f32> {
        &self.nets[part as usize]
    }

    pub fn net_mut(&mut self, part: Part) -> &mut Net<f32> {
        &mut self.nets[part as usize]
    }

    pub fn num_params(&self, part: Part) -> usize {
        self.net(part).params.len()
    }

    /// FNV-1a over the bit patterns of a part's parameters.
    pub fn checksum(&self, part: Part) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.net(part).params {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// One joint optimizer step over `parts`, clipping their combined
    /// gradient norm. Returns the pre-clip norm.
    pub fn step(&mut self, parts: &[Part], grads: &mut ModelGrads, cfg: &OptimConfig, lr: f64) -> Result<f64> {
        let mut params = Vec::with_capacity(parts.len());
        let mut states = Vec::with_capacity(parts.len());
        for (i, (net, st)) in self.nets.iter_mut().zip(self.optim.iter_mut()).enumerate() {
            if parts.iter().any(|&p| p as usize == i) {
                params.push(net.params.as_mut_slice());
                states.push(st);
            }
        }
        let mut gs: Vec<&mut [f32]> = grads
            .grads
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| parts.iter().any(|&p| p as usize == *i))
            .map(|(_, g)| g.as_mut_slice())
            .collect();
        adam_step(cfg, lr, &mut params, &mut gs, &mut states)
    }

    /// `target <- (1 - tau) * target + tau * online` for the Q head.
    pub fn polyak_update_qvalue(&mut self, tau: f32) {
        let online = &self.nets[Part::QValue as usize].params;
        for (t, &o) in self.qvalue_target.params.iter_mut().zip(online) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Gradient buffers matching every part of a `ModelSet`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub grads: Vec<Vec<f32>>,
}

impl ModelGrads {
    pub fn zeros(models: &ModelSet) -> Self {
        Self {
            grads: models.nets.iter().map(|n| vec![0.0; n.params.len()]).collect(),
        }
    }

    pub fn get(&self, part: Part) -> &[f32] {
        &self.grads[part as usize]
    }

    pub fn get_mut(&mut self, part: Part) -> &mut [f32] {
        &mut self.grads[part as usize]
    }

    pub fn is_zero(&self, part: Part) -> bool {
        self.get(part).iter().all(|&g| g == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax, Tensor};

    /// Parameter count of the declared architecture, computed by hand from
    /// the layer sizes rather than through `Arch`.
    fn closed_form_counts(h: usize, w: usize, d: usize, hidden: usize) -> [usize; 8] {
        let out = |n: usize, k: usize, s: usize| (n - k) / s + 1;
        let (h1, w1) = (out(h, 5, 2), out(w, 5, 2));
        let (h2, w2) = (out(h1, 3, 2), out(w1, 3, 2));
        let (h3, w3) = (out(h2, 3, 2), out(w2, 3, 2));
        let enc = (16 * 3 * 25 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * h3 * w3 * d + d);
        let head = |i: usize, o: usize| i * hidden + hidden + hidden * o + o;
        [
            enc,
            enc,
            head(d, 4),
            head(d, 1),
            head(d, 4),
            head(d, 1),
            head(2 * d, 4),
            head(2 * d, 1),
        ]
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let models = ModelSet::init(&ArchConfig::default(), 0).unwrap();
        let want = closed_form_counts(64, 64, 64, 128);
        assert_eq!(want[0], 88_896);
        for part in ALL_PARTS {
            assert_eq!(models.num_params(part), want[part as usize], "{}", part.name());
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ModelSet::init(&ArchConfig::default(), 42).unwrap();
        let b = ModelSet::init(&ArchConfig::default(), 42).unwrap();
        let c = ModelSet::init(&ArchConfig::default(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.net(Part::Policy).params, c.net(Part::Policy).params);
        // Distinct storage, identical starting point.
        assert_eq!(a.net(Part::EncT).params, a.net(Part::EncS).params);
        assert_ne!(a.net(Part::Value).params, a.net(Part::Disc).params[..a.num_params(Part::Value)]);
    }

    #[test]
    fn policy_at_init_gives_finite_logits() {
        let models = ModelSet::init(&ArchConfig::default(), 1).unwrap();
        let x = Tensor::matrix(3, 64, (0..192).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let logits = models.net(Part::Policy).forward(&x).unwrap();
        assert_eq!(logits.shape, vec![3, 4]);
        assert!(logits.all_finite());
        for i in 0..3 {
            let p = softmax(logits.row(i));
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 0.05));
        }
    }
}
