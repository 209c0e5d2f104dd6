use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Net, Tensor};
use crate::error::Result;

const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so parameters with vanishing
/// gradients are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;
/// Parameters sampled per weight or bias block.
const SAMPLES_PER_BLOCK: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the parameter with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares backpropagated gradients of a random linear functional of the
/// outputs against central finite differences, in 64-bit arithmetic, on a
/// random small batch.
pub fn grad_check(net: &Net<f32>, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(net, tolerance, seed, None, |_| {})
}

/// Like [`grad_check`], with an optional fixed input batch and a hook that
/// may tamper with the analytic gradient before comparison.
pub fn grad_check_with(
    net: &Net<f32>,
    tolerance: f64,
    seed: u64,
    input: Option<Tensor<f64>>,
    corrupt: impl Fn(&mut [f64]),
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: Net<f64> = net.cast();
    let arch = net.arch.clone();
    let is_image = arch.input_shape.len() == 3;
    let x = match input {
        Some(x) => x,
        None => {
            let batch = if is_image { 2 } else { 3 };
            let n = batch * arch.input_len();
            let data = (0..n)
                .map(|_| if is_image { rng.gen_range(0.0..1.0) } else { rng.gen_range(-1.5..1.5) })
                .collect();
            let mut shape = vec![batch];
            shape.extend(&arch.input_shape);
            Tensor::new(shape, data)?
        }
    };
    let (y, tape) = net.forward_tape(&x)?;
    let coef: Vec<f64> = (0..y.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut analytic = vec![0.0; net.params.len()];
    net.backward(&tape, &coef, &mut analytic, false)?;
    corrupt(&mut analytic);

    let loss = |net: &Net<f64>| -> Result<f64> {
        let y = net.forward(&x)?;
        Ok(y.data.iter().zip(&coef).map(|(a, b)| a * b).sum())
    };

    let mut indices = Vec::new();
    for (li, layer) in arch.layers.iter().enumerate() {
        let mut start = arch.offset(li);
        for block in layer.param_blocks() {
            if block <= SAMPLES_PER_BLOCK {
                indices.extend(start..start + block);
            } else {
                indices.extend((0..SAMPLES_PER_BLOCK).map(|_| start + rng.gen_range(0..block)));
            }
            start += block;
        }
    }

    let mut worst = (0.0f64, 0usize);
    for &i in &indices {
        let orig = net.params[i];
        net.params[i] = orig + FD_STEP;
        let up = loss(&net)?;
        net.params[i] = orig - FD_STEP;
        let down = loss(&net)?;
        net.params[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: indices.len(),
        tolerance,
    })
}
