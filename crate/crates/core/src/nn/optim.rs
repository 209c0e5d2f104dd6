use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied over every group of one step.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("OptimConfig.{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("OptimConfig decay rates must be < 1".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Scales every gradient in place so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected adaptive-moment descent step over a group of parameter
/// vectors, after clipping their joint gradient norm. Returns the pre-clip
/// gradient norm.
pub fn adam_step(
    cfg: &OptimConfig,
    lr: f64,
    params: &mut [&mut [f32]],
    grads: &mut [&mut [f32]],
    states: &mut [&mut AdamState],
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != states.len() {
        return Err(Error::shape(
            format!("{} gradient and state groups", params.len()),
            format!("{} / {}", grads.len(), states.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.len() != g.len() || p.len() != states[i].m.len() {
            return Err(Error::shape(format!("group {i} of {} values", p.len()), g.len()));
        }
    }
    if grads.iter().flat_map(|g| g.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let norm = clip_global_norm(grads, cfg.clip_norm);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for ((p, g), st) in params.iter_mut().zip(grads.iter()).zip(states.iter_mut()) {
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = cfg.eps as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for i in 0..p.len() {
            let gi = g[i];
            st.m[i] = b1f * st.m[i] + (1.0 - b1f) * gi;
            st.v[i] = b2f * st.v[i] + (1.0 - b2f) * gi * gi;
            let denom = st.v[i].sqrt() / bc2_sqrt + eps;
            p[i] -= step_size * st.m[i] / denom;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(params: &mut [f32], grads: &mut [f32], st: &mut AdamState, cfg: &OptimConfig) -> f64 {
        adam_step(cfg, cfg.lr, &mut [params], &mut [grads], &mut [st]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = OptimConfig::default();
        let mut p = vec![0.5f32, -1.0, 2.0];
        let mut st = AdamState::new(3);
        step(&mut p, &mut [0.0; 3], &mut st, &cfg);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_against_sign() {
        let cfg = OptimConfig::default();
        let mut p = vec![0.0f32; 4];
        let mut st = AdamState::new(4);
        step(&mut p, &mut [3.0, -0.01, 0.2, -7.0], &mut st, &cfg);
        for (&pi, s) in p.iter().zip([-1.0f32, 1.0, -1.0, 1.0]) {
            assert!((pi - s * 3e-4).abs() < 1e-8, "{pi}");
        }
    }

    #[test]
    fn global_norm_is_clipped_across_groups() {
        let mut a = vec![60.0f32, 0.0];
        let mut b = vec![0.0f32, 80.0];
        let norm = clip_global_norm(&mut [&mut a, &mut b], 10.0);
        assert!((norm - 100.0).abs() < 1e-9);
        let after = (a[0] * a[0] + b[1] * b[1]).sqrt();
        assert!((after - 10.0).abs() < 1e-5);
        assert!((a[0] - 6.0).abs() < 1e-5 && (b[1] - 8.0).abs() < 1e-5);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let cfg = OptimConfig::default();
        let mut p = vec![0.0f32];
        let mut st = AdamState::new(1);
        let r = adam_step(&cfg, cfg.lr, &mut [&mut p], &mut [&mut [f32::NAN]], &mut [&mut st]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
