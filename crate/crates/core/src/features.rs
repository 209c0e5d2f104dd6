//! Raw-frame storage and encoder application.
//!
//! Frames are interned: identical pixel buffers share one [`FrameId`]. A
//! minibatch is embedded by running the encoder once per distinct frame and
//! scattering the rows back; the backward pass sums the row gradients of
//! repeated frames, which is exactly the gradient of the expanded batch.

use std::collections::HashMap;
use std::sync::Arc;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{Flow, ModelGrads, ModelSet, Part, Tape, Tensor};

pub type FrameId = u32;

#[derive(Debug, Clone, Default)]
pub struct FramePool {
    frames: Vec<Observation>,
    index: HashMap<Arc<[u8]>, FrameId>,
}

impl FramePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, obs: &Observation) -> FrameId {
        if let Some(&id) = self.index.get(&obs.pixels) {
            return id;
        }
        let id = self.frames.len() as FrameId;
        self.frames.push(obs.clone());
        self.index.insert(obs.pixels.clone(), id);
        id
    }

    pub fn get(&self, id: FrameId) -> &Observation {
        &self.frames[id as usize]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = FrameId> {
        0..self.frames.len() as FrameId
    }
}

/// Converts HWC bytes to a CHW batch scaled to `[0, 1]`.
pub fn frames_to_input(frames: &[&Observation]) -> Result<Tensor<f32>> {
    let Some(first) = frames.first() else {
        return Err(Error::shape("at least one frame", "empty batch"));
    };
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![0.0f32; frames.len() * 3 * plane];
    for (n, f) in frames.iter().enumerate() {
        if f.height != h || f.width != w {
            return Err(Error::shape(format!("{h}x{w} frame"), format!("{}x{}", f.height, f.width)));
        }
        let dst = &mut data[n * 3 * plane..(n + 1) * 3 * plane];
        for (p, px) in f.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![frames.len(), 3, h, w], data)
}

/// Encoder outputs for a batch of frame ids.
#[derive(Debug)]
pub struct Embedded {
    pub part: Part,
    /// `[batch, d]`, one row per requested id.
    pub rows: Tensor<f32>,
    /// Row of `unique` feeding each batch entry.
    slot: Vec<usize>,
    unique_count: usize,
    tape: Option<Tape<f32>>,
}

impl Embedded {
    pub fn unique_count(&self) -> usize {
        self.unique_count
    }

    /// Back-propagates `grad_rows` (`[batch, d]`) into the encoder's
    /// gradient buffer. A no-op for stop-gradient embeddings.
    pub fn backward(&self, models: &ModelSet, grad_rows: &[f32], grads: &mut ModelGrads) -> Result<()> {
        let Some(tape) = &self.tape else {
            return Ok(());
        };
        let d = self.rows.row_len();
        if grad_rows.len() != self.rows.data.len() {
            return Err(Error::shape(self.rows.data.len(), grad_rows.len()));
        }
        let mut folded = vec![0.0f32; self.unique_count * d];
        for (i, &s) in self.slot.iter().enumerate() {
            for k in 0..d {
                folded[s * d + k] += grad_rows[i * d + k];
            }
        }
        models
            .net(self.part)
            .backward(tape, &folded, grads.get_mut(self.part), false)?;
        Ok(())
    }
}

/// Embeds `ids` from `pool` with encoder `part`, evaluating each distinct
/// frame once.
pub fn embed(models: &ModelSet, part: Part, pool: &FramePool, ids: &[FrameId], flow: Flow) -> Result<Embedded> {
    debug_assert!(part.is_encoder());
    let mut slot_of: HashMap<FrameId, usize> = HashMap::with_capacity(ids.len());
    let mut unique: Vec<FrameId> = Vec::new();
    let slot: Vec<usize> = ids
        .iter()
        .map(|&id| {
            *slot_of.entry(id).or_insert_with(|| {
                unique.push(id);
                unique.len() - 1
            })
        })
        .collect();
    let frames: Vec<&Observation> = unique.iter().map(|&id| pool.get(id)).collect();
    let input = frames_to_input(&frames)?;
    let net = models.net(part);
    let (out, tape) = match flow {
        Flow::Track => {
            let (y, t) = net.forward_tape(&input)?;
            (y, Some(t))
        }
        Flow::Stop => (net.forward(&input)?, None),
    };
    let d = out.row_len();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &s in &slot {
        data.extend_from_slice(out.row(s));
    }
    Ok(Embedded {
        part,
        rows: Tensor::matrix(ids.len(), d, data)?,
        slot,
        unique_count: unique.len(),
        tape,
    })
}

/// Detached embeddings of every frame in a pool, indexed by id.
pub fn embed_pool(models: &ModelSet, part: Part, pool: &FramePool) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(pool.len());
    let ids: Vec<FrameId> = pool.ids().collect();
    for chunk in ids.chunks(CHUNK) {
        let e = embed(models, part, pool, chunk, Flow::Stop)?;
        for i in 0..chunk.len() {
            out.push(e.rows.row(i).to_vec());
        }
    }
    Ok(out)
}

/// Gathers cached embeddings into a `[batch, d]` tensor.
pub fn gather(cache: &[Vec<f32>], ids: &[FrameId]) -> Result<Tensor<f32>> {
    let d = cache.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(&cache[id as usize]);
    }
    Tensor::matrix(ids.len(), d, data)
}
