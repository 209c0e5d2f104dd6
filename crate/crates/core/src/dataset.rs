//! Observation-only "video" datasets.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "OBSD" | u32 version=1 | u32 frames | u16 H | u16 W | u8 C
//!        | u32 episodes | u32 start[episodes] | u8 pixels[frames*H*W*C]
//!        | u8 theme code | u8 has_seed | u64 seed
//! ```
//!
//! The trailing metadata block is optional on read; files that stop right
//! after the pixel payload load with an `external` tag and no seed.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, GridConfig, GridEnv, Observation, Theme};
use crate::error::{Error, Result};

pub const OBSD_MAGIC: &[u8; 4] = b"OBSD";
pub const OBSD_VERSION: u32 = 1;

/// Where the frames of a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThemeTag {
    Rendered(Theme),
    External,
}

impl ThemeTag {
    fn code(self) -> u8 {
        match self {
            ThemeTag::External => 0,
            ThemeTag::Rendered(Theme::Target) => 1,
            ThemeTag::Rendered(Theme::SourceVariant) => 2,
            ThemeTag::Rendered(Theme::Thermal) => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ThemeTag::External,
            1 => ThemeTag::Rendered(Theme::Target),
            2 => ThemeTag::Rendered(Theme::SourceVariant),
            3 => ThemeTag::Rendered(Theme::Thermal),
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ThemeTag::External => "external",
            ThemeTag::Rendered(t) => t.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub theme: ThemeTag,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    pub frames: Vec<Observation>,
    pub episode_starts: Vec<usize>,
    pub meta: DatasetMeta,
}

/// Consecutive within-episode frame index pairs `(i, i + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationPairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl ObservationPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A generated dataset together with the demonstrator's hidden actions,
/// indexed like `make_pairs` output. Only the frames go to disk.
#[derive(Debug, Clone)]
pub struct SourceVideo {
    pub dataset: FrameDataset,
    pub actions: Vec<Action>,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame index ranges of each episode.
    pub fn episodes(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (k, &start) in self.episode_starts.iter().enumerate() {
            let end = self
                .episode_starts
                .get(k + 1)
                .copied()
                .unwrap_or(self.frames.len());
            out.push(start..end);
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        if let Some(&first) = self.episode_starts.first() {
            if first != 0 {
                return Err(Error::Config(format!("first episode starts at {first}, not 0")));
            }
        }
        if self.episode_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("episode starts are not strictly increasing".into()));
        }
        if let Some(&last) = self.episode_starts.last() {
            if last >= self.frames.len() {
                return Err(Error::Config(format!(
                    "episode start {last} beyond {} frames",
                    self.frames.len()
                )));
            }
        }
        let (h, w) = (self.meta.height, self.meta.width);
        if let Some(bad) = self.frames.iter().position(|f| f.height != h || f.width != w) {
            return Err(Error::shape(format!("{h}x{w} frames"), format!("frame {bad}")));
        }
        Ok(())
    }

    pub fn make_pairs(&self) -> Result<ObservationPairSet> {
        let pairs: Vec<_> = self
            .episodes()
            .into_iter()
            .flat_map(|ep| (ep.start..ep.end.saturating_sub(1)).map(|i| (i, i + 1)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::EmptyPairs);
        }
        Ok(ObservationPairSet { pairs })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.meta.channels;
        let mut out = Vec::with_capacity(
            24 + 4 * self.episode_starts.len() + self.frames.len() * self.meta.height * self.meta.width * c,
        );
        out.extend_from_slice(OBSD_MAGIC);
        out.extend_from_slice(&OBSD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.meta.width as u16).to_le_bytes());
        out.push(c as u8);
        out.extend_from_slice(&(self.episode_starts.len() as u32).to_le_bytes());
        for &s in &self.episode_starts {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for f in &self.frames {
            out.extend_from_slice(&f.pixels);
        }
        out.push(self.meta.theme.code());
        out.push(self.meta.seed.is_some() as u8);
        out.extend_from_slice(&self.meta.seed.unwrap_or(0).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != OBSD_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"OBSD\""),
            });
        }
        let version = r.u32("version")?;
        if version != OBSD_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let frames = r.u32("frame count")? as usize;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let channels = r.u8("channels")? as usize;
        if channels != Observation::CHANNELS {
            return Err(Error::Format {
                offset: r.pos as u64 - 1,
                message: format!("unsupported channel count {channels}"),
            });
        }
        let episodes = r.u32("episode count")? as usize;
        let mut episode_starts = Vec::with_capacity(episodes.min(1 << 20));
        for _ in 0..episodes {
            episode_starts.push(r.u32("episode start")? as usize);
        }
        let frame_len = height * width * channels;
        let payload_start = r.pos;
        let expected = frames * frame_len;
        let available = bytes.len() - payload_start;
        if available < expected {
            return Err(Error::Format {
                offset: payload_start as u64,
                message: format!(
                    "truncated frame payload: expected {expected} bytes, found {available}"
                ),
            });
        }
        let mut out_frames = Vec::with_capacity(frames);
        for _ in 0..frames {
            let px = r.take(frame_len, "frame")?;
            out_frames.push(Observation {
                height,
                width,
                pixels: px.into(),
            });
        }
        let (theme, seed) = if r.remaining() == 0 {
            (ThemeTag::External, None)
        } else {
            let code_at = r.pos as u64;
            let code = r.u8("theme code")?;
            let theme = ThemeTag::from_code(code).ok_or(Error::Format {
                offset: code_at,
                message: format!("unknown theme code {code}"),
            })?;
            let has_seed = r.u8("seed flag")? != 0;
            let seed = r.u64("seed")?;
            (theme, has_seed.then_some(seed))
        };
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", r.remaining()),
            });
        }
        let ds = FrameDataset {
            frames: out_frames,
            episode_starts,
            meta: DatasetMeta {
                height,
                width,
                channels,
                theme,
                seed,
            },
        };
        ds.check_invariants().map_err(|e| Error::Format {
            offset: 21,
            message: e.to_string(),
        })?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Records the scripted demonstrator episode by episode until `num_frames`
/// frames exist. Each episode contributes its reset frame plus one frame per
/// step.
pub fn generate_source_video(
    config: &GridConfig,
    epsilon: f64,
    num_frames: usize,
    seed: u64,
) -> Result<SourceVideo> {
    if !config.theme.is_source() {
        return Err(Error::Config(format!(
            "source videos need a source theme, got {}",
            config.theme.name()
        )));
    }
    if num_frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {num_frames}")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let env = GridEnv::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(num_frames);
    let mut episode_starts = Vec::new();
    let mut actions = Vec::with_capacity(num_frames);

    'episodes: while frames.len() < num_frames {
        let (mut state, obs) = env.reset();
        episode_starts.push(frames.len());
        frames.push(obs);
        while !env.is_terminal(&state) {
            if frames.len() == num_frames {
                break 'episodes;
            }
            let action = env.demonstrator_action(&state, epsilon, &mut rng);
            let (next, res) = env.step(&state, action)?;
            frames.push(res.observation);
            actions.push(action);
            state = next;
        }
    }

    let dataset = FrameDataset {
        frames,
        episode_starts,
        meta: DatasetMeta {
            height: config.obs_height,
            width: config.obs_width,
            channels: Observation::CHANNELS,
            theme: ThemeTag::Rendered(config.theme),
            seed: Some(seed),
        },
    };
    Ok(SourceVideo { dataset, actions })
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Loads a directory of numbered PNG/PPM frames as one unbroken episode.
pub fn ingest_frames(dir: impl AsRef<Path>) -> Result<FrameDataset> {
    let dir = dir.as_ref();
    let ingest_err = |path: &Path, message: String| Error::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let entries = fs::read_dir(dir).map_err(|e| ingest_err(dir, e.to_string()))?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ingest_err(dir, e.to_string()))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            continue;
        }
        let n = frame_number(&path)
            .ok_or_else(|| ingest_err(&path, "file name carries no frame number".into()))?;
        files.push((n, path));
    }
    files.sort();
    if files.len() < 2 {
        return Err(ingest_err(dir, format!("need at least 2 frames, found {}", files.len())));
    }

    let mut frames = Vec::with_capacity(files.len());
    let mut dims: Option<(usize, usize)> = None;
    for (_, path) in &files {
        let img = image::open(path)
            .map_err(|e| ingest_err(path, format!("cannot decode: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some((h0, w0)) if (h0, w0) != (h, w) => {
                return Err(ingest_err(
                    path,
                    format!("frame is {h}x{w}, earlier frames are {h0}x{w0}"),
                ));
            }
            _ => {}
        }
        frames.push(Observation::new(h, w, img.into_raw())?);
    }
    let (height, width) = dims.expect("at least two frames");
    Ok(FrameDataset {
        frames,
        episode_starts: vec![0],
        meta: DatasetMeta {
            height,
            width,
            channels: Observation::CHANNELS,
            theme: ThemeTag::External,
            seed: None,
        },
    })
}
