//! Per-class NMS over micro-tubes and online linking into action tubes.
//!
//! A micro-tube detected at `t` holds boxes at `t` and `t + delta`. The next
//! micro-tube, detected at `t + delta`, starts on the frame where the previous
//! one ends, so association only compares boxes living on the same frame:
//! the tail box of each active tube against the first box of each new
//! micro-tube.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, lerp, paired_mean_iou, BoundingBox};
use crate::prediction::PredictionHorizon;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const DEFAULT_DELTA: u32 = 1;

const SCORE_SUM_TOLERANCE: f64 = 1e-6;

/// Past and future boxes regressed alongside a micro-tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub horizon: PredictionHorizon,
    /// Box at `t - delta_p`.
    pub past: BoundingBox,
    /// Boxes at `t + k * delta_f` for `k = 1..=n`.
    pub future: Vec<BoundingBox>,
}

impl PredictionPayload {
    pub fn new(
        horizon: PredictionHorizon,
        past: BoundingBox,
        future: Vec<BoundingBox>,
    ) -> Result<Self> {
        if future.len() != horizon.n as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} future boxes for a horizon of {}",
                future.len(),
                horizon.n
            )));
        }
        Ok(Self {
            horizon,
            past,
            future,
        })
    }

    /// `(frame, box)` for each future box of a micro-tube detected at `t`.
    pub fn future_frames(&self, t: u32) -> impl Iterator<Item = (u32, BoundingBox)> + '_ {
        let step = self.horizon.delta_f;
        self.future
            .iter()
            .enumerate()
            .map(move |(k, b)| (t + (k as u32 + 1) * step, *b))
    }
}

/// One detector output: a micro-tube with its class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroTubeDetection {
    pub t: u32,
    pub delta: u32,
    pub boxes: [BoundingBox; 2],
    /// `C + 1` probabilities, background first.
    pub scores: Vec<f64>,
    pub prediction: Option<PredictionPayload>,
}

impl MicroTubeDetection {
    pub fn new(
        t: u32,
        delta: u32,
        boxes: [BoundingBox; 2],
        scores: Vec<f64>,
        prediction: Option<PredictionPayload>,
    ) -> Result<Self> {
        let d = Self {
            t,
            delta,
            boxes,
            scores,
            prediction,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::InvalidConfig(
                "micro-tube delta must be at least 1".into(),
            ));
        }
        if self.scores.len() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "{} class scores, need background plus at least one class",
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig(
                "class scores must be non-negative".into(),
            ));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "class scores sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.scores.len() - 1
    }

    /// Score of action class `class_id` (background excluded).
    pub fn class_score(&self, class_id: usize) -> f64 {
        self.scores.get(class_id + 1).copied().unwrap_or(0.0)
    }

    /// Frame of the second box.
    pub fn end(&self) -> u32 {
        self.t + self.delta
    }
}

/// Greedy NMS over micro-tubes using mean IoU across both frames.
///
/// Returns the kept indices in descending score order; equal scores keep
/// input order.
pub fn nms(tubes: &[[BoundingBox; 2]], scores: &[f64], threshold: f64) -> Vec<usize> {
    debug_assert_eq!(tubes.len(), scores.len());
    let mut order: Vec<usize> = (0..tubes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; tubes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && micro_tube_iou(&tubes[i], &tubes[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn micro_tube_iou(a: &[BoundingBox; 2], b: &[BoundingBox; 2]) -> f64 {
    paired_mean_iou(a, b).expect("two boxes each")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub nms_threshold: f64,
    /// Micro-tubes below this class score are dropped before NMS.
    pub score_threshold: f64,
    /// Weight of the IoU term in the link score.
    pub link_lambda: f64,
    /// Minimum tail IoU for a link.
    pub iou_gate: f64,
    /// Consecutive missed steps after which a tube is terminated.
    pub patience: u32,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            score_threshold: 0.01,
            link_lambda: 1.0,
            iou_gate: 0.1,
            patience: 1,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.nms_threshold) || !unit(self.iou_gate) || !unit(self.score_threshold) {
            return Err(Error::InvalidConfig(
                "nms threshold, score threshold and iou gate must lie in [0, 1]".into(),
            ));
        }
        if !(self.link_lambda >= 0.0 && self.link_lambda.is_finite()) {
            return Err(Error::InvalidConfig(
                "link lambda must be non-negative".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// A micro-tube that was linked into a tube, with the score of the tube's
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeMember {
    pub t: u32,
    pub delta: u32,
    pub class_score: f64,
    pub boxes: [BoundingBox; 2],
    pub prediction: Option<PredictionPayload>,
}

impl TubeMember {
    fn from_detection(d: &MicroTubeDetection, class_id: usize) -> Self {
        Self {
            t: d.t,
            delta: d.delta,
            class_score: d.class_score(class_id),
            boxes: d.boxes,
            prediction: d.prediction.clone(),
        }
    }

    pub fn end(&self) -> u32 {
        self.t + self.delta
    }
}

/// A tube under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedTube {
    pub class_id: usize,
    pub members: Vec<TubeMember>,
    /// Consecutive steps without an extension.
    pub misses: u32,
}

impl LinkedTube {
    fn tail(&self) -> &TubeMember {
        self.members
            .last()
            .expect("linked tubes have at least one member")
    }

    pub fn tail_frame(&self) -> u32 {
        self.tail().end()
    }

    pub fn tail_box(&self) -> BoundingBox {
        self.tail().boxes[1]
    }

    pub fn is_stalled(&self) -> bool {
        self.misses > 0
    }
}

/// Extends `active` with the micro-tubes detected at frame `t` for one class.
///
/// Candidate links need tail IoU of at least `iou_gate` and are resolved
/// greedily by `class score + lambda * IoU`, ties to the lower tube index and
/// then the lower micro-tube index. Each tube takes at most one micro-tube.
/// Unlinked micro-tubes start new tubes; unlinked tubes count a miss, and
/// those that reach `patience` misses are removed from `active` and returned.
pub fn link_step(
    active: &mut Vec<LinkedTube>,
    new: &[&MicroTubeDetection],
    t: u32,
    class_id: usize,
    config: &LinkConfig,
) -> Result<Vec<LinkedTube>> {
    if let Some(d) = new.iter().find(|d| d.t != t) {
        return Err(Error::TemporalDiscontinuity(format!(
            "micro-tube at t={} in the step for t={t}",
            d.t
        )));
    }
    for tube in active.iter() {
        let tail = tube.tail_frame();
        if tail > t || (!tube.is_stalled() && tail != t) {
            return Err(Error::TemporalDiscontinuity(format!(
                "tube ends at frame {tail}, expected {t}"
            )));
        }
    }

    let mut candidates = Vec::new();
    for (i, tube) in active.iter().enumerate() {
        let tail = tube.tail_box();
        for (j, d) in new.iter().enumerate() {
            let overlap = iou(&tail, &d.boxes[0]);
            if overlap >= config.iou_gate && overlap > 0.0 {
                let score = d.class_score(class_id) + config.link_lambda * overlap;
                candidates.push((score, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut tube_taken = vec![false; active.len()];
    let mut det_taken = vec![false; new.len()];
    for (_, i, j) in candidates {
        if tube_taken[i] || det_taken[j] {
            continue;
        }
        tube_taken[i] = true;
        det_taken[j] = true;
        active[i]
            .members
            .push(TubeMember::from_detection(new[j], class_id));
        active[i].misses = 0;
    }

    let mut terminated = Vec::new();
    let mut kept = Vec::with_capacity(active.len());
    for (tube, taken) in active.drain(..).zip(tube_taken) {
        let mut tube = tube;
        if !taken {
            tube.misses += 1;
        }
        if tube.misses >= config.patience {
            terminated.push(tube);
        } else {
            kept.push(tube);
        }
    }
    *active = kept;
    for (d, taken) in new.iter().zip(det_taken) {
        if !taken {
            active.push(LinkedTube {
                class_id,
                members: vec![TubeMember::from_detection(d, class_id)],
                misses: 0,
            });
        }
    }
    Ok(terminated)
}

/// A class-labelled tube split into its detected and predicted segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTube {
    pub class_id: usize,
    pub score: f64,
    pub detected: BTreeMap<u32, BoundingBox>,
    #[serde(default)]
    pub predicted: BTreeMap<u32, BoundingBox>,
    pub members: Vec<TubeMember>,
}

impl ActionTube {
    /// Detected segment from member micro-tubes. On the frame shared by two
    /// consecutive members the newer member's box wins; frames strictly
    /// inside a micro-tube (`delta > 1`) or inside a linking gap are
    /// interpolated.
    pub fn from_members(class_id: usize, members: Vec<TubeMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyTube);
        }
        let mut detected = BTreeMap::new();
        let mut prev: Option<(u32, BoundingBox)> = None;
        for m in &members {
            if let Some((pf, pb)) = prev {
                if m.t < pf {
                    return Err(Error::TemporalDiscontinuity(format!(
                        "member at t={} overlaps previous member ending at {pf}",
                        m.t
                    )));
                }
                fill_between(&mut detected, pf, &pb, m.t, &m.boxes[0]);
            }
            detected.insert(m.t, m.boxes[0]);
            fill_between(&mut detected, m.t, &m.boxes[0], m.end(), &m.boxes[1]);
            detected.insert(m.end(), m.boxes[1]);
            prev = Some((m.end(), m.boxes[1]));
        }
        let score = members.iter().map(|m| m.class_score).sum::<f64>() / members.len() as f64;
        Ok(Self {
            class_id,
            score,
            detected,
            predicted: BTreeMap::new(),
            members,
        })
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.detected.keys().next().copied()
    }

    pub fn last_detected_frame(&self) -> Option<u32> {
        self.detected.keys().next_back().copied()
    }

    /// Detected and predicted boxes together.
    pub fn full(&self) -> BTreeMap<u32, BoundingBox> {
        let mut all = self.detected.clone();
        all.extend(self.predicted.iter().map(|(f, b)| (*f, *b)));
        all
    }
}

fn fill_between(
    out: &mut BTreeMap<u32, BoundingBox>,
    from: u32,
    a: &BoundingBox,
    to: u32,
    b: &BoundingBox,
) {
    if to <= from + 1 {
        return;
    }
    let span = f64::from(to - from);
    for f in from + 1..to {
        out.insert(f, lerp(a, b, f64::from(f - from) / span));
    }
}

/// Builds action tubes for one video from its time-ordered micro-tube stream.
///
/// Every class is linked independently: at each step the micro-tubes scoring
/// at least `score_threshold` for the class go through NMS and then
/// [`link_step`]. The result is sorted by descending tube score.
pub fn build_tubes(
    stream: &[MicroTubeDetection],
    num_classes: usize,
    config: &LinkConfig,
) -> Result<Vec<ActionTube>> {
    config.validate()?;
    let Some(first) = stream.first() else {
        return Ok(Vec::new());
    };
    let delta = first.delta;
    for pair in stream.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(Error::UnsortedStream(pair[1].t));
        }
    }
    for d in stream {
        if d.delta != delta {
            return Err(Error::TemporalDiscontinuity(format!(
                "mixed micro-tube gaps {delta} and {}",
                d.delta
            )));
        }
        if (d.t - first.t) % delta != 0 {
            return Err(Error::TemporalDiscontinuity(format!(
                "micro-tube at t={} is off the {delta}-frame lattice starting at {}",
                d.t, first.t
            )));
        }
        if d.num_classes() != num_classes {
            return Err(Error::DimensionMismatch(format!(
                "micro-tube at t={} has {} classes, expected {num_classes}",
                d.t,
                d.num_classes()
            )));
        }
    }

    let mut steps: BTreeMap<u32, Vec<&MicroTubeDetection>> = BTreeMap::new();
    for d in stream {
        steps.entry(d.t).or_default().push(d);
    }
    let last_t = stream[stream.len() - 1].t;

    let per_class: Vec<Vec<ActionTube>> = (0..num_classes)
        .into_par_iter()
        .map(|c| link_class(&steps, first.t, last_t, delta, c, config))
        .collect::<Result<_>>()?;
    let mut tubes: Vec<ActionTube> = per_class.into_iter().flatten().collect();
    tubes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(tubes)
}

fn link_class(
    steps: &BTreeMap<u32, Vec<&MicroTubeDetection>>,
    first_t: u32,
    last_t: u32,
    delta: u32,
    class_id: usize,
    config: &LinkConfig,
) -> Result<Vec<ActionTube>> {
    let mut active = Vec::new();
    let mut done = Vec::new();
    let mut t = first_t;
    while t <= last_t {
        let candidates: Vec<&MicroTubeDetection> = steps
            .get(&t)
            .map(|v| {
                v.iter()
                    .copied()
                    .filter(|d| {
                        d.class_score(class_id) >= config.score_threshold
                            && d.class_score(class_id) > 0.0
                    })
                    .collect()
            })
            .unwrap_or_default();
        let boxes: Vec<[BoundingBox; 2]> = candidates.iter().map(|d| d.boxes).collect();
        let scores: Vec<f64> = candidates.iter().map(|d| d.class_score(class_id)).collect();
        let kept: Vec<&MicroTubeDetection> = nms(&boxes, &scores, config.nms_threshold)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        done.extend(link_step(&mut active, &kept, t, class_id, config)?);
        t += delta;
    }
    done.extend(active);
    done.into_iter()
        .map(|tube| ActionTube::from_members(tube.class_id, tube.members))
        .collect()
}
