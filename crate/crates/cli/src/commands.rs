//! Subcommand implementations, callable without going through argv.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use tubekit::dataio::{
    format_sweep, read_detections, read_manifest, sweep_rows, write_detections, write_manifest,
    write_report, write_tubes, DatasetManifest, DetectionStream, SweepRow, TubesFile, VideoTubes,
};
use tubekit::linking::build_tubes;
use tubekit::losses::{check_loss_gradients, GradCheckReport};
use tubekit::metrics::{
    observed_frames, run_video, truncate_stream, EvalReport, MetricKind, Threshold,
};
use tubekit::synth::{generate, ScenarioSpec};

use crate::config::RunConfig;

/// Gradient checks pass below this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub detections: PathBuf,
}

/// Writes `manifest.json` and `detections.jsonl` for a synthetic scenario.
pub fn cmd_synth(spec: &ScenarioSpec, out_dir: &Path) -> Result<SynthOutput> {
    let (manifest, stream) = generate(spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let out = SynthOutput {
        manifest: out_dir.join("manifest.json"),
        detections: out_dir.join("detections.jsonl"),
    };
    write_manifest(&out.manifest, &manifest)?;
    write_detections(&out.detections, &stream)?;
    Ok(out)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: ScenarioSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn load_inputs(manifest: &Path, detections: &Path) -> Result<(DatasetManifest, DetectionStream)> {
    let m = read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let d =
        read_detections(detections).with_context(|| format!("reading {}", detections.display()))?;
    if let Some(id) = d.keys().find(|id| m.video(id).is_none()) {
        bail!("detections for unknown video '{id}'");
    }
    Ok((m, d))
}

/// Links (and optionally completes) the tubes of every video after
/// observing `pct` percent of it.
pub fn build_all(
    manifest: &DatasetManifest,
    stream: &DetectionStream,
    cfg: &RunConfig,
    pct: u32,
    complete: bool,
) -> Result<TubesFile> {
    let eval = cfg.eval()?;
    let num_classes = manifest.classes.len();
    let videos = manifest
        .videos
        .par_iter()
        .map(|v| {
            let dets = stream.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
            let observed = observed_frames(v.num_frames, pct);
            let tubes = if complete {
                run_video(dets, num_classes, v.num_frames, v.frame, observed, &eval)?.tubes
            } else {
                build_tubes(&truncate_stream(dets, observed), num_classes, &eval.link)?
            };
            Ok(VideoTubes {
                id: v.id.clone(),
                observed,
                num_frames: v.num_frames,
                tubes,
            })
        })
        .collect::<tubekit::Result<Vec<_>>>()?;
    Ok(TubesFile { videos })
}

pub fn cmd_tubes(
    cfg: &RunConfig,
    manifest: &Path,
    detections: &Path,
    pct: u32,
    complete: bool,
    out: &Path,
) -> Result<TubesFile> {
    if pct == 0 || pct > 100 {
        bail!("observation percentage must be in 1..=100, got {pct}");
    }
    let (m, d) = load_inputs(manifest, detections)?;
    let tubes = build_all(&m, &d, cfg, pct, complete)?;
    write_tubes(out, &tubes).with_context(|| format!("writing {}", out.display()))?;
    Ok(tubes)
}

pub fn evaluate(cfg: &RunConfig, manifest: &Path, detections: &Path) -> Result<EvalReport> {
    let (m, d) = load_inputs(manifest, detections)?;
    Ok(tubekit::metrics::evaluate_sweep(&m, &d, &cfg.eval()?)?)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    manifest: &Path,
    detections: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let report = evaluate(cfg, manifest, detections)?;
    write_report(&report, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(report)
}

/// One `model=detections` pair of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub model: String,
    pub detections: PathBuf,
}

impl std::str::FromStr for SweepRun {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((m, p)) if !m.is_empty() && !p.is_empty() => Ok(SweepRun {
                model: m.to_owned(),
                detections: PathBuf::from(p),
            }),
            _ => Err(format!("expected MODEL=PATH, got '{s}'")),
        }
    }
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    manifest: &Path,
    runs: &[SweepRun],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if runs.is_empty() {
        bail!("sweep needs at least one MODEL=PATH run");
    }
    let mut rows = Vec::new();
    for run in runs {
        let report = evaluate(cfg, manifest, &run.detections)
            .with_context(|| format!("evaluating model '{}'", run.model))?;
        rows.extend(sweep_rows(&run.model, &report));
    }
    let file = fs::File::create(out).with_context(|| format!("writing {}", out.display()))?;
    format_sweep(&rows, std::io::BufWriter::new(file))?;
    Ok(rows)
}

pub fn cmd_check_loss(seed: u64, trials: usize, epsilon: f64) -> GradCheckReport {
    check_loss_gradients(seed, trials, epsilon)
}

/// Human-readable digest of a report: class-mean values at δ = 0.5.
pub fn summarize(report: &EvalReport) -> String {
    let pcts: std::collections::BTreeSet<u32> =
        report.cells.keys().map(|k| k.observed_pct).collect();
    let mut s = String::from("pct  accuracy  online-map  p-map  c-map   (delta 0.50)\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
    for pct in pcts {
        let at = Threshold::at(0.5);
        s += &format!(
            "{pct:>3}  {:>8}  {:>10}  {:>5}  {:>5}\n",
            fmt(report.mean(MetricKind::Accuracy, Threshold::None, pct)),
            fmt(report.mean(MetricKind::OnlineMap, at, pct)),
            fmt(report.mean(MetricKind::PMap, at, pct)),
            fmt(report.mean(MetricKind::CMap, at, pct)),
        );
    }
    if let Some(v) = report.mean(MetricKind::DetectionMap, Threshold::at(0.5), 100) {
        s += &format!("detection-map@0.50: {v:.4}\n");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_run_parse() {
        let r: SweepRun = "base=runs/a.jsonl".parse().unwrap();
        assert_eq!(r.model, "base");
        assert_eq!(r.detections, PathBuf::from("runs/a.jsonl"));
        assert!("noequals".parse::<SweepRun>().is_err());
        assert!("=x".parse::<SweepRun>().is_err());
    }
}
