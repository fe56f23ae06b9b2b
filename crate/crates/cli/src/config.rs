//! Run configuration: a TOML document whose fields can be overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use tubekit::anchors::DEFAULT_MATCH_THRESHOLD;
use tubekit::linking::{LinkConfig, DEFAULT_DELTA, DEFAULT_NMS_THRESHOLD};
use tubekit::losses::{DEFAULT_ALPHA, DEFAULT_BETA};
use tubekit::metrics::EvalConfig;
use tubekit::prediction::{Aggregation, PredictionHorizon};
use tubekit::synth::{NoiseSpec, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub actors: usize,
    pub frames: u32,
    pub classes: usize,
    pub noise: NoiseSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            actors: 1,
            frames: 40,
            classes: 21,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub nms: f64,
    pub score_threshold: f64,
    pub link_lambda: f64,
    pub iou_gate: f64,
    pub patience: u32,
    pub match_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: u32,
    pub horizon: PredictionHorizon,
    pub aggregation: Aggregation,
    pub delta_list: Vec<f64>,
    pub pct_list: Vec<u32>,
    pub truncate_online_gt: bool,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let link = LinkConfig::default();
        let eval = EvalConfig::default();
        Self {
            manifest: None,
            detections: None,
            out: None,
            nms: DEFAULT_NMS_THRESHOLD,
            score_threshold: link.score_threshold,
            link_lambda: link.link_lambda,
            iou_gate: link.iou_gate,
            patience: link.patience,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            delta: DEFAULT_DELTA,
            horizon: PredictionHorizon::default(),
            aggregation: Aggregation::default(),
            delta_list: eval.deltas,
            pct_list: eval.percentages,
            truncate_online_gt: true,
            seed: 0,
            jobs: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn link(&self) -> LinkConfig {
        LinkConfig {
            nms_threshold: self.nms,
            score_threshold: self.score_threshold,
            link_lambda: self.link_lambda,
            iou_gate: self.iou_gate,
            patience: self.patience,
        }
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            link: self.link(),
            horizon: self.horizon,
            aggregation: self.aggregation,
            deltas: self.delta_list.clone(),
            percentages: self.pct_list.clone(),
            truncate_online_gt: self.truncate_online_gt,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> ScenarioSpec {
        let s = &self.synth;
        let mut spec = ScenarioSpec::lanes(self.seed, s.videos, s.actors, s.frames, s.classes);
        spec.delta = self.delta;
        spec.horizon = self.horizon;
        spec.noise = s.noise.clone();
        spec
    }

    pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        match path {
            Some(p) => Ok(p.clone()),
            None => bail!("missing {what}: pass --{what} or set it in the config file"),
        }
    }
}

/// Parses a comma-separated list such as `0.2,0.5,0.75`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list item '{p}': {e}"))
        })
        .collect()
}
