//! Binary checkpoints.
//!
//! ```text
//! "AWCK" | u32 version=1 | u32 len | arch config JSON
//!        | u64 iteration | u64 env_steps
//!        | u32 rng count | (32-byte seed, u64 stream, u128 word position)*
//!        | u32 net count | (u32 len, f32 params[len])*        (8 parts, then the target Q copy)
//!        | (u64 step, u32 len, f32 m[len], f32 v[len])*       (one per part)
//! ```
//!
//! Integers and floats are little-endian; floats are stored by bit pattern so
//! a round trip is exact.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{AdamState, ArchConfig, ModelSet, Net, ALL_PARTS};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AWCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub models: ModelSet,
    pub rngs: Vec<RngState>,
    pub iteration: u64,
    pub env_steps: u64,
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.extend_from_slice(&(vals.len() as u32).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.models.arch).expect("arch config serializes");
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.env_steps.to_le_bytes());
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            out.extend_from_slice(&r.seed);
            out.extend_from_slice(&r.stream.to_le_bytes());
            out.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        out.extend_from_slice(&(self.models.nets.len() as u32 + 1).to_le_bytes());
        for net in &self.models.nets {
            put_f32s(&mut out, &net.params);
        }
        put_f32s(&mut out, &self.models.qvalue_target.params);
        for st in &self.models.optim {
            out.extend_from_slice(&st.step.to_le_bytes());
            put_f32s(&mut out, &st.m);
            for v in &st.v {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic, expected \"AWCK\"".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let arch_len = r.u32()? as usize;
        let arch_at = r.pos;
        let arch: ArchConfig = serde_json::from_slice(r.take(arch_len)?).map_err(|e| Error::Format {
            offset: arch_at as u64,
            message: format!("bad arch config: {e}"),
        })?;
        let iteration = r.u64()?;
        let env_steps = r.u64()?;
        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng.min(64));
        for _ in 0..n_rng {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            rngs.push(RngState {
                seed,
                stream,
                word_pos,
            });
        }

        let mut models = ModelSet::init(&arch, 0).map_err(|e| Error::Format {
            offset: arch_at as u64,
            message: e.to_string(),
        })?;
        let n_nets = r.u32()? as usize;
        if n_nets != ALL_PARTS.len() + 1 {
            return Err(Error::Format {
                offset: r.pos as u64 - 4,
                message: format!("expected {} networks, found {n_nets}", ALL_PARTS.len() + 1),
            });
        }
        for part in ALL_PARTS {
            let at = r.pos;
            let params = r.f32s()?;
            let net = models.net_mut(part);
            if params.len() != net.params.len() {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!(
                        "{} holds {} parameters, architecture needs {}",
                        part.name(),
                        params.len(),
                        net.params.len()
                    ),
                });
            }
            net.params = params;
        }
        let at = r.pos;
        let target = r.f32s()?;
        if target.len() != models.qvalue_target.params.len() {
            return Err(Error::Format {
                offset: at as u64,
                message: "target Q network size mismatch".into(),
            });
        }
        models.qvalue_target = Net {
            arch: Arc::clone(&models.qvalue_target.arch),
            params: target,
        };
        for part in ALL_PARTS {
            let step = r.u64()?;
            let at = r.pos;
            let m = r.f32s()?;
            if m.len() != models.num_params(part) {
                return Err(Error::Format {
                    offset: at as u64,
                    message: format!("optimizer state size mismatch for {}", part.name()),
                });
            }
            let mut v = Vec::with_capacity(m.len());
            for _ in 0..m.len() {
                v.push(f32::from_bits(r.u32()?));
            }
            models.optim[part as usize] = AdamState { step, m, v };
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            models,
            rngs,
            iteration,
            env_steps,
        })
    }

    /// Errors unless every network matches the shapes implied by `arch`.
    pub fn check_compatible(&self, arch: &ArchConfig) -> Result<()> {
        if &self.models.arch == arch {
            return Ok(());
        }
        let want = ModelSet::init(arch, 0)?;
        for part in ALL_PARTS {
            let (have, need) = (self.models.num_params(part), want.num_params(part));
            if have != need {
                return Err(Error::shape(
                    format!("{} with {need} parameters", part.name()),
                    format!("{have} parameters in checkpoint"),
                ));
            }
        }
        Err(Error::shape(format!("{arch:?}"), format!("{:?}", self.models.arch)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}
