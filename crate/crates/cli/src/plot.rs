//! Multi-seed aggregation of metrics files into learning curves and a
//! final-window bar summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::{CliError, CliResult};

/// Evaluation rows averaged for the bar summary.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub steps: Vec<u64>,
    pub rewards: Vec<f64>,
}

/// Reads `env_steps` and `eval_mean_reward` from a metrics file.
pub fn read_curve(path: &Path) -> CliResult<Curve> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column {name}", path.display())))
    };
    let (cs, cr) = (col("env_steps")?, col("eval_mean_reward")?);
    let mut curve = Curve {
        steps: Vec::new(),
        rewards: Vec::new(),
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| CliError::Usage(format!("{}: row {}: bad {what}", path.display(), line + 1));
        curve.steps.push(rec[cs].parse().map_err(|_| bad("env_steps"))?);
        curve.rewards.push(rec[cr].parse().map_err(|_| bad("eval_mean_reward"))?);
    }
    Ok(curve)
}

/// Mean and standard error (sample deviation over `sqrt(n)`; zero for one
/// value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub label: String,
    pub seeds: usize,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub final_mean: f64,
    pub final_stderr: f64,
}

/// Aggregates each label's seeds. Every file must share one step grid.
pub fn aggregate(groups: &[(String, Vec<PathBuf>)]) -> CliResult<Vec<LabelSummary>> {
    let mut loaded = Vec::new();
    for (label, paths) in groups {
        if paths.is_empty() {
            return Err(CliError::Usage(format!("label {label} has no metrics files")));
        }
        let curves = paths.iter().map(|p| read_curve(p)).collect::<CliResult<Vec<_>>>()?;
        loaded.push((label, paths, curves));
    }
    let reference = &loaded[0].2[0].steps;
    if reference.is_empty() {
        return Err(CliError::Usage(format!("{} has no rows", loaded[0].1[0].display())));
    }
    let offenders: Vec<String> = loaded
        .iter()
        .flat_map(|(_, paths, curves)| paths.iter().zip(curves))
        .filter(|(_, c)| &c.steps != reference)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !offenders.is_empty() {
        return Err(CliError::Usage(format!(
            "inconsistent step grids (reference {}): {}",
            loaded[0].1[0].display(),
            offenders.join(", ")
        )));
    }
    let mut out = Vec::new();
    for (label, _, curves) in &loaded {
        let n = reference.len();
        let (mut mean, mut stderr) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let col: Vec<f64> = curves.iter().map(|c| c.rewards[i]).collect();
            let (m, s) = mean_stderr(&col);
            mean.push(m);
            stderr.push(s);
        }
        let finals: Vec<f64> = curves
            .iter()
            .map(|c| {
                let tail = &c.rewards[n.saturating_sub(FINAL_WINDOW)..];
                tail.iter().sum::<f64>() / tail.len() as f64
            })
            .collect();
        let (final_mean, final_stderr) = mean_stderr(&finals);
        out.push(LabelSummary {
            label: label.to_string(),
            seeds: curves.len(),
            steps: reference.clone(),
            mean,
            stderr,
            final_mean,
            final_stderr,
        });
    }
    Ok(out)
}

pub fn curves_csv(summaries: &[LabelSummary]) -> String {
    let mut s = String::from("label,env_steps,mean_reward,stderr,seeds\n");
    for l in summaries {
        for i in 0..l.steps.len() {
            let _ = writeln!(s, "{},{},{},{},{}", l.label, l.steps[i], l.mean[i], l.stderr[i], l.seeds);
        }
    }
    s
}

pub fn final_csv(summaries: &[LabelSummary]) -> String {
    let mut s = String::from("label,final_mean_reward,stderr,seeds\n");
    for l in summaries {
        let _ = writeln!(s, "{},{},{},{}", l.label, l.final_mean, l.final_stderr, l.seeds);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Learning curves with standard-error bands (left) and final-window bars
/// with error bars (right).
pub fn render_svg(summaries: &[LabelSummary]) -> String {
    let (w, h) = (960.0, 420.0);
    let (left, top, pw, ph) = (60.0, 30.0, 540.0, 330.0);
    let (bx, bw) = (680.0, 240.0);
    let max_step = summaries
        .iter()
        .flat_map(|l| l.steps.last().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let values = summaries.iter().flat_map(|l| {
        l.mean
            .iter()
            .zip(&l.stderr)
            .flat_map(|(m, s)| [m - s, m + s])
            .chain([l.final_mean - l.final_stderr, l.final_mean + l.final_stderr])
            .collect::<Vec<_>>()
    });
    let (mut lo, mut hi) = values.fold((0.0f64, 1.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    lo -= 0.05 * (hi - lo);
    let x = |s: f64| left + pw * s / max_step;
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
        let s = max_step * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{s:.0}</text>"#,
            x(s),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle">mean evaluation reward (± s.e.)</text>"#,
        left + pw / 2.0
    );
    for (i, l) in summaries.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = (0..l.steps.len())
            .map(|k| format!("{:.2},{:.2}", x(l.steps[k] as f64), y(l.mean[k] + l.stderr[k])))
            .collect();
        let lower: Vec<String> = (0..l.steps.len())
            .rev()
            .map(|k| format!("{:.2},{:.2}", x(l.steps[k] as f64), y(l.mean[k] - l.stderr[k])))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = (0..l.steps.len())
            .map(|k| format!("{:.2},{:.2}", x(l.steps[k] as f64), y(l.mean[k])))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{c}">{} (n={})</text>"#,
            left + 8.0,
            top + 16.0 + 14.0 * i as f64,
            escape(&l.label),
            l.seeds
        );
    }

    let _ = writeln!(
        svg,
        r#"<rect x="{bx}" y="{top}" width="{bw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle">final {FINAL_WINDOW} evaluations</text>"#,
        bx + bw / 2.0
    );
    let slot = bw / summaries.len().max(1) as f64;
    for (i, l) in summaries.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let cx = bx + slot * (i as f64 + 0.5);
        let (y0, y1) = (y(lo.max(0.0).min(hi)), y(l.final_mean));
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#,
            cx - slot * 0.3,
            y0.min(y1),
            slot * 0.6,
            (y0 - y1).abs()
        );
        let (e0, e1) = (y(l.final_mean - l.final_stderr), y(l.final_mean + l.final_stderr));
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.2}" y1="{e0:.2}" x2="{cx:.2}" y2="{e1:.2}" stroke="black" stroke-width="1.5"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            top + ph + 16.0,
            escape(&l.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<out>` (SVG), `<stem>_curves.csv` and `<stem>_final.csv`.
pub fn plot(groups: &[(String, Vec<PathBuf>)], out: &Path) -> CliResult<Vec<LabelSummary>> {
    let summaries = aggregate(groups)?;
    let write = |path: PathBuf, body: String| -> CliResult<()> {
        fs::write(&path, body).map_err(|e| CliError::Core(awpo::Error::Io { path, source: e }))
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Core(awpo::Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })?;
    }
    let stem = out.with_extension("");
    let stem = stem.to_string_lossy();
    write(out.to_path_buf(), render_svg(&summaries))?;
    write(PathBuf::from(format!("{stem}_curves.csv")), curves_csv(&summaries))?;
    write(PathBuf::from(format!("{stem}_final.csv")), final_csv(&summaries))?;
    Ok(summaries)
}

/// Parses `NAME=path[,path...]`.
pub fn parse_label(arg: &str) -> CliResult<(String, Vec<PathBuf>)> {
    let (name, paths) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--label expects NAME=path[,path...], got {arg:?}")))?;
    let paths: Vec<PathBuf> = paths.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if name.is_empty() || paths.is_empty() {
        return Err(CliError::Usage(format!("--label expects NAME=path[,path...], got {arg:?}")));
    }
    Ok((name.to_string(), paths))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_hand_cases() {
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_stderr(&[0.8, 1.0]);
        assert!((m - 0.9).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn label_syntax() {
        let (name, paths) = parse_label("gae=a.csv,b.csv").unwrap();
        assert_eq!(name, "gae");
        assert_eq!(paths, vec![PathBuf::from("a.csv"), PathBuf::from("b.csv")]);
        assert!(parse_label("nolabel").is_err());
        assert!(parse_label("x=").is_err());
    }
}
