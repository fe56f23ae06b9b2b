//! Spatio-temporal evaluation.
//!
//! Tube overlap is the mean per-frame IoU over the union of both tubes'
//! frames, with frames present in only one tube scoring 0. Average precision
//! uses every-point interpolation of the precision/recall curve. The sweep
//! evaluates a dataset as if only the first `ceil(q * T / 100)` frames of
//! each video had been observed, for each observation percentage `q`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::linking::{build_tubes, ActionTube, LinkConfig, MicroTubeDetection};
use crate::prediction::{early_label, predict_full_tube, Aggregation, PredictionHorizon};

pub type FrameBoxes = BTreeMap<u32, BoundingBox>;

/// Ground-truth tube of one video: consecutive boxes from `start_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTube {
    pub class_id: usize,
    pub start_frame: u32,
    pub boxes: Vec<BoundingBox>,
}

impl GroundTruthTube {
    pub fn end_frame(&self) -> u32 {
        self.start_frame + self.boxes.len() as u32 - 1
    }

    pub fn frame_boxes(&self) -> FrameBoxes {
        self.boxes
            .iter()
            .enumerate()
            .map(|(k, b)| (self.start_frame + k as u32, *b))
            .collect()
    }
}

pub fn tube_iou(a: &FrameBoxes, b: &FrameBoxes) -> f64 {
    let mut union = 0usize;
    let mut sum = 0.0;
    let mut ia = a.iter().peekable();
    let mut ib = b.iter().peekable();
    loop {
        match (ia.peek(), ib.peek()) {
            (None, None) => break,
            (Some(_), None) => {
                union += ia.by_ref().count();
            }
            (None, Some(_)) => {
                union += ib.by_ref().count();
            }
            (Some((fa, ba)), Some((fb, bb))) => {
                union += 1;
                match fa.cmp(fb) {
                    std::cmp::Ordering::Less => {
                        ia.next();
                    }
                    std::cmp::Ordering::Greater => {
                        ib.next();
                    }
                    std::cmp::Ordering::Equal => {
                        sum += iou(ba, bb);
                        ia.next();
                        ib.next();
                    }
                }
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        sum / union as f64
    }
}

/// A scored detection tube of one class in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTube {
    pub video: usize,
    pub score: f64,
    pub boxes: FrameBoxes,
}

/// Ground-truth tube of one class in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTube {
    pub video: usize,
    pub boxes: FrameBoxes,
}

/// Labels detections true/false positive in descending score order.
///
/// A detection claims the unclaimed same-video ground truth with the highest
/// tube IoU (lowest index on ties) when that IoU reaches `delta`.
pub fn label_detections(detections: &[ScoredTube], gts: &[GtTube], delta: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &detections[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !claimed[*j] && g.video == d.video)
                .map(|(j, g)| (j, tube_iou(&d.boxes, &g.boxes)))
                .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                    Some((_, b)) if b >= o => acc,
                    _ => Some((j, o)),
                });
            match best {
                Some((j, o)) if o >= delta => {
                    claimed[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Every-point interpolated AP of a ranked TP/FP sequence.
pub fn ap_from_labels(ranked: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gts as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP of one class at tube-IoU threshold `delta`; `None` when the class has
/// no ground truth.
pub fn average_precision(detections: &[ScoredTube], gts: &[GtTube], delta: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let labels = label_detections(detections, gts, delta);
    Some(ap_from_labels(&labels, gts.len()))
}

/// Mean over classes whose AP is defined.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Thresholds averaged by avg-mAP: 0.50, 0.55, ..., 0.95.
pub fn avg_map_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * f64::from(k)).collect()
}

/// Mean of per-threshold mAPs.
pub fn avg_map(maps: &[Option<f64>]) -> Option<f64> {
    mean_ap(maps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    DetectionMap,
    OnlineMap,
    PMap,
    CMap,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::DetectionMap => "detection-map",
            MetricKind::OnlineMap => "online-map",
            MetricKind::PMap => "p-map",
            MetricKind::CMap => "c-map",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            MetricKind::Accuracy,
            MetricKind::DetectionMap,
            MetricKind::OnlineMap,
            MetricKind::PMap,
            MetricKind::CMap,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Detection threshold key of a report cell, stored in thousandths so cells
/// compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Threshold {
    /// Accuracy does not depend on a threshold.
    None,
    At(u32),
    /// Mean over 0.50:0.05:0.95.
    Average,
}

impl Threshold {
    pub fn at(delta: f64) -> Self {
        Threshold::At((delta * 1000.0).round() as u32)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Threshold::At(m) => Some(f64::from(*m) / 1000.0),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "-" => Some(Threshold::None),
            "avg" => Some(Threshold::Average),
            _ => s
                .parse::<f64>()
                .ok()
                .filter(|d| *d > 0.0 && *d < 1.0)
                .map(Threshold::at),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::None => f.write_str("-"),
            Threshold::Average => f.write_str("avg"),
            Threshold::At(m) if m % 10 == 0 => write!(f, "{:.2}", f64::from(*m) / 1000.0),
            Threshold::At(m) => write!(f, "{:.3}", f64::from(*m) / 1000.0),
        }
    }
}

/// Row label: a class id or the mean over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassKey {
    Class(usize),
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub metric: MetricKind,
    pub threshold: Threshold,
    pub observed_pct: u32,
    pub class: ClassKey,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub cells: BTreeMap<CellKey, f64>,
}

impl EvalReport {
    pub fn get(
        &self,
        metric: MetricKind,
        threshold: Threshold,
        pct: u32,
        class: ClassKey,
    ) -> Option<f64> {
        self.cells
            .get(&CellKey {
                metric,
                threshold,
                observed_pct: pct,
                class,
            })
            .copied()
    }

    /// Mean-over-classes value of a cell.
    pub fn mean(&self, metric: MetricKind, threshold: Threshold, pct: u32) -> Option<f64> {
        self.get(metric, threshold, pct, ClassKey::Mean)
    }

    pub fn insert(&mut self, key: CellKey, value: f64) {
        self.cells.insert(key, value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub link: LinkConfig,
    pub horizon: PredictionHorizon,
    pub aggregation: Aggregation,
    pub deltas: Vec<f64>,
    pub percentages: Vec<u32>,
    /// Compare online detections with ground truth cut at the observed
    /// frame (true) or with the full ground-truth tubes (false).
    pub truncate_online_gt: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut deltas = vec![0.2, 0.5, 0.75];
        deltas.extend(avg_map_thresholds());
        Self {
            link: LinkConfig::default(),
            horizon: PredictionHorizon::default(),
            aggregation: Aggregation::default(),
            deltas,
            percentages: (1..=10).map(|k| k * 10).collect(),
            truncate_online_gt: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        if self.percentages.is_empty() {
            return Err(Error::InvalidConfig("no observation percentages".into()));
        }
        if let Some(q) = self.percentages.iter().find(|q| **q == 0 || **q > 100) {
            return Err(Error::InvalidConfig(format!(
                "observation percentage {q} not in 1..=100"
            )));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(Error::InvalidConfig(format!("threshold {d} not in (0, 1)")));
        }
        Ok(())
    }

    /// Distinct thresholds to evaluate: the configured ones plus the ones
    /// avg-mAP needs.
    fn thresholds(&self) -> Vec<Threshold> {
        let mut all: Vec<Threshold> = self
            .deltas
            .iter()
            .chain(avg_map_thresholds().iter())
            .map(|d| Threshold::at(*d))
            .collect();
        all.sort();
        all.dedup();
        all
    }
}

/// Number of observed frames at percentage `q` of a `num_frames` video.
pub fn observed_frames(num_frames: u32, pct: u32) -> u32 {
    (u64::from(pct) * u64::from(num_frames)).div_ceil(100) as u32
}

/// Micro-tubes fully visible after observing frames `1..=observed`.
pub fn truncate_stream(stream: &[MicroTubeDetection], observed: u32) -> Vec<MicroTubeDetection> {
    stream
        .iter()
        .filter(|d| d.end() <= observed)
        .cloned()
        .collect()
}

/// Per-video output of the pipeline at one observation level.
#[derive(Debug, Clone)]
pub struct VideoOutcome {
    pub observed: u32,
    pub tubes: Vec<ActionTube>,
}

/// Truncates, links and completes the tubes of one video.
pub fn run_video(
    stream: &[MicroTubeDetection],
    num_classes: usize,
    num_frames: u32,
    frame: crate::geometry::FrameSize,
    observed: u32,
    config: &EvalConfig,
) -> Result<VideoOutcome> {
    let visible = truncate_stream(stream, observed);
    let tubes = build_tubes(&visible, num_classes, &config.link)?;
    let tubes = tubes
        .iter()
        .map(|t| {
            predict_full_tube(
                t,
                observed,
                num_frames,
                config.horizon,
                frame,
                config.aggregation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoOutcome { observed, tubes })
}

/// Majority class of a video's ground-truth tubes, ties to the lowest id.
pub fn video_label(tubes: &[GroundTruthTube]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tubes {
        *counts.entry(t.class_id).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

type Selector = fn(&ActionTube, u32) -> FrameBoxes;

fn detected_segment(t: &ActionTube, _observed: u32) -> FrameBoxes {
    t.detected.clone()
}

fn future_segment(t: &ActionTube, observed: u32) -> FrameBoxes {
    t.predicted
        .range(observed + 1..)
        .map(|(f, b)| (*f, *b))
        .collect()
}

fn complete_tube(t: &ActionTube, _observed: u32) -> FrameBoxes {
    t.full()
}

fn restrict(boxes: &FrameBoxes, lo: u32, hi: u32) -> FrameBoxes {
    if lo > hi {
        return FrameBoxes::new();
    }
    boxes.range(lo..=hi).map(|(f, b)| (*f, *b)).collect()
}

/// Writes per-class AP and the class mean for every threshold.
#[allow(clippy::too_many_arguments)]
fn score_cells(
    report: &mut EvalReport,
    metric: MetricKind,
    pct: u32,
    num_classes: usize,
    detections: &[Vec<ScoredTube>],
    gts: &[Vec<GtTube>],
    thresholds: &[Threshold],
    emitted: &[Threshold],
) {
    let mut per_threshold: BTreeMap<Threshold, Vec<Option<f64>>> = BTreeMap::new();
    for th in thresholds {
        let delta = th.value().expect("numeric threshold");
        let aps: Vec<Option<f64>> = (0..num_classes)
            .into_par_iter()
            .map(|c| average_precision(&detections[c], &gts[c], delta))
            .collect();
        per_threshold.insert(*th, aps);
    }
    let key = |threshold, class| CellKey {
        metric,
        threshold,
        observed_pct: pct,
        class,
    };
    for th in emitted {
        let aps = &per_threshold[th];
        for (c, ap) in aps.iter().enumerate() {
            if let Some(ap) = ap {
                report.insert(key(*th, ClassKey::Class(c)), *ap);
            }
        }
        if let Some(m) = mean_ap(aps) {
            report.insert(key(*th, ClassKey::Mean), m);
        }
    }
    let avg: Vec<Threshold> = avg_map_thresholds()
        .into_iter()
        .map(Threshold::at)
        .collect();
    #[allow(clippy::needless_range_loop)]
    for c in 0..num_classes {
        let vals: Vec<Option<f64>> = avg.iter().map(|th| per_threshold[th][c]).collect();
        if vals.iter().all(Option::is_some) {
            report.insert(
                key(Threshold::Average, ClassKey::Class(c)),
                mean_ap(&vals).expect("defined"),
            );
        }
    }
    let maps: Vec<Option<f64>> = avg.iter().map(|th| mean_ap(&per_threshold[th])).collect();
    if maps.iter().all(Option::is_some) {
        if let Some(m) = avg_map(&maps) {
            report.insert(key(Threshold::Average, ClassKey::Mean), m);
        }
    }
}

/// Collects, per class, the detections selected from every video's tubes and
/// the matching ground truth restricted to `[lo, hi]` frames per video.
fn gather(
    manifest: &DatasetManifest,
    outcomes: &[VideoOutcome],
    select: Selector,
    gt_window: impl Fn(&VideoOutcome, u32) -> (u32, u32),
) -> (Vec<Vec<ScoredTube>>, Vec<Vec<GtTube>>) {
    let c = manifest.classes.len();
    let mut dets = vec![Vec::new(); c];
    let mut gts = vec![Vec::new(); c];
    for (v, (video, outcome)) in manifest.videos.iter().zip(outcomes).enumerate() {
        for t in &outcome.tubes {
            let boxes = select(t, outcome.observed);
            if !boxes.is_empty() && t.class_id < c {
                dets[t.class_id].push(ScoredTube {
                    video: v,
                    score: t.score,
                    boxes,
                });
            }
        }
        let (lo, hi) = gt_window(outcome, video.num_frames);
        for g in &video.tubes {
            let boxes = restrict(&g.frame_boxes(), lo, hi);
            if !boxes.is_empty() {
                gts[g.class_id].push(GtTube { video: v, boxes });
            }
        }
    }
    (dets, gts)
}

fn run_all(
    manifest: &DatasetManifest,
    detections: &BTreeMap<String, Vec<MicroTubeDetection>>,
    pct: u32,
    config: &EvalConfig,
) -> Result<Vec<VideoOutcome>> {
    let c = manifest.classes.len();
    manifest
        .videos
        .par_iter()
        .map(|v| {
            let stream = detections.get(&v.id).map(Vec::as_slice).unwrap_or(&[]);
            let observed = observed_frames(v.num_frames, pct);
            run_video(stream, c, v.num_frames, v.frame, observed, config)
        })
        .collect()
}

/// Runs the full protocol over every observation percentage.
///
/// Per percentage this reports label accuracy, online mAP on the detected
/// segments, p-mAP on the predicted future against the unobserved ground
/// truth (absent when no video has an unobserved future) and c-mAP on the
/// completed tubes against the full ground truth. Detection mAP is reported
/// once, at 100%.
pub fn evaluate_sweep(
    manifest: &DatasetManifest,
    detections: &BTreeMap<String, Vec<MicroTubeDetection>>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if let Some(id) = detections
        .keys()
        .find(|id| !manifest.videos.iter().any(|v| &v.id == *id))
    {
        return Err(Error::Manifest(format!(
            "detections for unknown video '{id}'"
        )));
    }
    let num_classes = manifest.classes.len();
    let thresholds = config.thresholds();
    let emitted: Vec<Threshold> = {
        let mut e: Vec<Threshold> = config.deltas.iter().map(|d| Threshold::at(*d)).collect();
        e.sort();
        e.dedup();
        e
    };
    let mut report = EvalReport {
        class_names: manifest.classes.clone(),
        cells: BTreeMap::new(),
    };
    let labels: Vec<Option<usize>> = manifest
        .videos
        .iter()
        .map(|v| video_label(&v.tubes))
        .collect();

    let mut pcts = config.percentages.clone();
    pcts.sort_unstable();
    pcts.dedup();
    let mut full_observation = None;
    for &pct in &pcts {
        let outcomes = run_all(manifest, detections, pct, config)?;

        // Accuracy.
        let mut hits = vec![(0usize, 0usize); num_classes];
        for (outcome, label) in outcomes.iter().zip(&labels) {
            let Some(label) = label else { continue };
            let predicted = early_label(&outcome.tubes).ok();
            hits[*label].1 += 1;
            if predicted == Some(*label) {
                hits[*label].0 += 1;
            }
        }
        let acc_key = |class| CellKey {
            metric: MetricKind::Accuracy,
            threshold: Threshold::None,
            observed_pct: pct,
            class,
        };
        for (c, (h, n)) in hits.iter().enumerate() {
            if *n > 0 {
                report.insert(acc_key(ClassKey::Class(c)), *h as f64 / *n as f64);
            }
        }
        let (h, n) = hits
            .iter()
            .fold((0, 0), |acc, (h, n)| (acc.0 + h, acc.1 + n));
        if n > 0 {
            report.insert(acc_key(ClassKey::Mean), h as f64 / n as f64);
        }

        let online_window = |o: &VideoOutcome, t: u32| {
            if config.truncate_online_gt {
                (1, o.observed)
            } else {
                (1, t)
            }
        };
        let (d, g) = gather(manifest, &outcomes, detected_segment, online_window);
        score_cells(
            &mut report,
            MetricKind::OnlineMap,
            pct,
            num_classes,
            &d,
            &g,
            &thresholds,
            &emitted,
        );

        let (d, g) = gather(manifest, &outcomes, future_segment, |o, t| {
            (o.observed + 1, t)
        });
        if g.iter().any(|v| !v.is_empty()) {
            score_cells(
                &mut report,
                MetricKind::PMap,
                pct,
                num_classes,
                &d,
                &g,
                &thresholds,
                &emitted,
            );
        }

        let (d, g) = gather(manifest, &outcomes, complete_tube, |_, t| (1, t));
        score_cells(
            &mut report,
            MetricKind::CMap,
            pct,
            num_classes,
            &d,
            &g,
            &thresholds,
            &emitted,
        );

        if pct == 100 {
            full_observation = Some(outcomes);
        }
    }

    let outcomes = match full_observation {
        Some(o) => o,
        None => run_all(manifest, detections, 100, config)?,
    };
    let (d, g) = gather(manifest, &outcomes, detected_segment, |_, t| (1, t));
    score_cells(
        &mut report,
        MetricKind::DetectionMap,
        100,
        num_classes,
        &d,
        &g,
        &thresholds,
        &emitted,
    );
    Ok(report)
}
