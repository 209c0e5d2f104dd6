//! Command implementations for the `awpo` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use awpo::config::RunConfig;
use awpo::dataset::{generate_source_video, ingest_frames, FrameDataset};
use awpo::env::GridEnv;
use awpo::features::FramePool;
use awpo::nn::{grad_check, grad_check_with, load_checkpoint, ModelSet, Part, ALL_PARTS};
use awpo::train::run_training;

pub mod plot;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] awpo::Error),
    #[error("{0}")]
    Usage(String),
    /// A check ran and failed.
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                awpo::Error::Numeric(_) | awpo::Error::NumericAt { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.dataset.seed = s;
    }
    Ok(cfg)
}

/// Writes the configured source video and returns a one-line summary.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    let src = cfg
        .source_env
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no source_env to render".into()))?;
    let video = generate_source_video(src, cfg.dataset.epsilon, cfg.dataset.num_frames, cfg.dataset.seed)?;
    let ds = video.dataset;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| awpo::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ds.save(out)?;
    let episodes = ds.episode_starts.len();
    Ok(format!(
        "wrote {}: {} frames, {} episodes, mean episode length {:.2}",
        out.display(),
        ds.len(),
        episodes,
        ds.len() as f64 / episodes as f64
    ))
}

/// The source dataset named by the config, if source data is enabled.
pub fn load_source(cfg: &RunConfig) -> CliResult<Option<FrameDataset>> {
    if !cfg.awpo.use_source {
        return Ok(None);
    }
    match (&cfg.dataset.path, &cfg.dataset.external_frames) {
        (Some(p), _) => Ok(Some(FrameDataset::load(p)?)),
        (None, Some(dir)) => Ok(Some(ingest_frames(dir)?)),
        (None, None) => Err(CliError::Usage(
            "awpo.use_source needs dataset.path or dataset.external_frames".into(),
        )),
    }
}

/// Output directory: the flag, then `AWPO_OUT_DIR`, then the config.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os("AWPO_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

pub fn train(mut cfg: RunConfig, out: &Path) -> CliResult<String> {
    cfg.output_dir = out.to_path_buf();
    let source = load_source(&cfg)?;
    fs::create_dir_all(out).map_err(|e| awpo::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let resolved = out.join("config.resolved");
    fs::write(&resolved, cfg.resolved_json()).map_err(|e| awpo::Error::Io {
        path: resolved.clone(),
        source: e,
    })?;
    let outcome = run_training(&cfg, source.as_ref(), Some(out))?;
    let last = outcome.rows.last();
    Ok(format!(
        "{} iterations, {} evaluation rows, final eval reward {}; wrote {}",
        cfg.iterations(),
        outcome.rows.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.3}", r.eval_mean_reward)),
        out.join("metrics.csv").display()
    ))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, episodes: usize) -> CliResult<(f64, f64)> {
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    ckpt.check_compatible(&cfg.arch)?;
    let env = GridEnv::new(cfg.env.clone())?;
    let mut pool = FramePool::new();
    Ok(awpo::awpo::evaluate(&ckpt.models, &env, &mut pool, episodes)?)
}

/// Worst relative error per part. `fault` perturbs one part's analytic
/// gradient to exercise the failure path.
pub fn gradcheck(seed: u64, fault: Option<Part>) -> CliResult<Vec<(Part, f64, bool)>> {
    let models = ModelSet::init(&awpo::nn::ArchConfig::default(), seed)?;
    let mut out = Vec::with_capacity(ALL_PARTS.len());
    for part in ALL_PARTS {
        let net = models.net(part);
        let report = if fault == Some(part) {
            grad_check_with(net, GRADCHECK_TOLERANCE, seed, None, |g: &mut [f64]| {
                g.iter_mut().for_each(|x| *x = *x * 1.01 + 1e-3);
            })?
        } else {
            grad_check(net, GRADCHECK_TOLERANCE, seed)?
        };
        out.push((part, report.max_rel_error, report.passed()));
    }
    Ok(out)
}

pub fn print_gradcheck(report: &[(Part, f64, bool)], mut w: impl Write) -> CliResult<bool> {
    let mut ok = true;
    for (part, err, passed) in report {
        ok &= passed;
        let _ = writeln!(
            w,
            "{:<11} max rel error {:.3e}  {}",
            part.name(),
            err,
            if *passed { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Check("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(awpo::Error::Config("x".into())).exit_code(), 2);
        let numeric = awpo::Error::NumericAt {
            iteration: 4,
            message: "nan".into(),
        };
        assert_eq!(CliError::Core(numeric).exit_code(), 3);
    }
}
