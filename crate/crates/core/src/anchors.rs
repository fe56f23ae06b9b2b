//! Prior boxes and the bipartite mean-IoU matching of ground-truth
//! micro-tubes to priors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_iou, BoundingBox, FrameSize, Variances};

/// Overlap at or above which a prior is a positive match.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// One feature map of the prior pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub rows: u32,
    pub cols: u32,
    /// Box side as a fraction of the image side.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBoxSpec {
    pub maps: Vec<FeatureMap>,
    pub aspect_ratios: Vec<f64>,
    pub frame: FrameSize,
    #[serde(default)]
    pub variances: Variances,
}

impl PriorBoxSpec {
    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::InvalidConfig(
                "prior spec needs at least one grid".into(),
            ));
        }
        if self.aspect_ratios.is_empty() {
            return Err(Error::InvalidConfig(
                "prior spec needs an aspect ratio".into(),
            ));
        }
        for m in &self.maps {
            if m.rows == 0 || m.cols == 0 {
                return Err(Error::InvalidConfig(format!(
                    "empty grid {}x{}",
                    m.rows, m.cols
                )));
            }
            if !(m.scale > 0.0 && m.scale <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "scale {} not in (0, 1]",
                    m.scale
                )));
            }
        }
        if let Some(r) = self
            .aspect_ratios
            .iter()
            .find(|r| !(r.is_finite() && **r > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "aspect ratio {r} must be positive"
            )));
        }
        Ok(())
    }
}

impl Default for PriorBoxSpec {
    /// A small SSD-style pyramid over a 300x300 frame.
    fn default() -> Self {
        let grids = [38, 19, 10, 5, 3, 1];
        let scales = [0.1, 0.2, 0.375, 0.55, 0.725, 0.9];
        Self {
            maps: grids
                .iter()
                .zip(scales)
                .map(|(&g, scale)| FeatureMap {
                    rows: g,
                    cols: g,
                    scale,
                })
                .collect(),
            aspect_ratios: vec![1.0, 2.0, 0.5],
            frame: FrameSize::new(300, 300).expect("non-zero frame"),
            variances: Variances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorBoxSet {
    boxes: Vec<BoundingBox>,
    variances: Variances,
}

impl PriorBoxSet {
    pub fn new(boxes: Vec<BoundingBox>, variances: Variances) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidConfig("prior set is empty".into()));
        }
        if boxes.iter().any(BoundingBox::is_degenerate) {
            return Err(Error::DegenerateBox);
        }
        Ok(Self { boxes, variances })
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn variances(&self) -> Variances {
        self.variances
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Lays out one box per (cell, aspect ratio), map-major, row-major,
/// ratio-minor. A ratio `r` box has `w / h = r` and area
/// `scale^2 * W * H`.
pub fn generate_priors(spec: &PriorBoxSpec) -> Result<PriorBoxSet> {
    spec.validate()?;
    let fw = f64::from(spec.frame.width());
    let fh = f64::from(spec.frame.height());
    let side = (fw * fh).sqrt();
    let mut boxes = Vec::new();
    for m in &spec.maps {
        for r in 0..m.rows {
            for c in 0..m.cols {
                let cx = (f64::from(c) + 0.5) / f64::from(m.cols) * fw;
                let cy = (f64::from(r) + 0.5) / f64::from(m.rows) * fh;
                for &ar in &spec.aspect_ratios {
                    let w = m.scale * side * ar.sqrt();
                    let h = m.scale * side / ar.sqrt();
                    boxes.push(BoundingBox::from_center(cx, cy, w, h)?);
                }
            }
        }
    }
    PriorBoxSet::new(boxes, spec.variances)
}

/// A ground-truth micro-tube (boxes at `t` and `t + delta`) with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMicroTube {
    pub boxes: Vec<BoundingBox>,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorMatch {
    pub gt: usize,
    pub class_id: usize,
    pub overlap: f64,
    /// Set when the match came from the bipartite step rather than the
    /// threshold step.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    per_prior: Vec<Option<PriorMatch>>,
    forced: Vec<usize>,
}

impl MatchAssignment {
    /// An assignment in which no prior is matched.
    pub fn unmatched(num_priors: usize) -> Self {
        Self {
            per_prior: vec![None; num_priors],
            forced: Vec::new(),
        }
    }

    pub fn per_prior(&self) -> &[Option<PriorMatch>] {
        &self.per_prior
    }

    /// Index of the prior claimed by each ground truth in the bipartite step.
    pub fn forced_priors(&self) -> &[usize] {
        &self.forced
    }

    pub fn num_priors(&self) -> usize {
        self.per_prior.len()
    }

    pub fn n_matched(&self) -> usize {
        self.per_prior.iter().filter(|m| m.is_some()).count()
    }

    /// The `x_{i,j}^c` indicator.
    pub fn indicator(&self, prior: usize, gt: usize, class_id: usize) -> bool {
        matches!(
            self.per_prior.get(prior),
            Some(Some(m)) if m.gt == gt && m.class_id == class_id
        )
    }
}

/// Matches ground-truth micro-tubes to priors by mean IoU.
///
/// First every ground truth claims a distinct prior, greedily in descending
/// overlap over all (free prior, unassigned gt) pairs; ties go to the lowest
/// prior index, then the lowest gt index. Then every remaining prior whose
/// best ground truth reaches `threshold` is matched to it.
pub fn match_priors(
    priors: &PriorBoxSet,
    gts: &[GroundTruthMicroTube],
    threshold: f64,
) -> Result<MatchAssignment> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "match threshold {threshold} not in (0, 1]"
        )));
    }
    let p = priors.len();
    if gts.len() > p {
        return Err(Error::InsufficientPriors {
            gts: gts.len(),
            priors: p,
        });
    }
    let overlaps: Vec<Vec<f64>> = priors
        .boxes()
        .iter()
        .map(|prior| gts.iter().map(|g| mean_iou(prior, &g.boxes)).collect())
        .collect::<Result<_>>()?;

    let mut per_prior: Vec<Option<PriorMatch>> = vec![None; p];
    let mut forced = vec![usize::MAX; gts.len()];
    for _ in 0..gts.len() {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in overlaps.iter().enumerate() {
            if per_prior[i].is_some() {
                continue;
            }
            for (j, &o) in row.iter().enumerate() {
                if forced[j] != usize::MAX {
                    continue;
                }
                // Strict comparison keeps the first (lowest prior, then gt) on ties.
                if best.is_none_or(|(_, _, b)| o > b) {
                    best = Some((i, j, o));
                }
            }
        }
        let (i, j, o) = best.expect("free prior and gt exist while gts <= priors");
        forced[j] = i;
        per_prior[i] = Some(PriorMatch {
            gt: j,
            class_id: gts[j].class_id,
            overlap: o,
            forced: true,
        });
    }

    for (i, row) in overlaps.iter().enumerate() {
        if per_prior[i].is_some() {
            continue;
        }
        let best =
            row.iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (j, &o)| match acc {
                    Some((_, b)) if b >= o => acc,
                    _ => Some((j, o)),
                });
        if let Some((j, o)) = best {
            if o >= threshold {
                per_prior[i] = Some(PriorMatch {
                    gt: j,
                    class_id: gts[j].class_id,
                    overlap: o,
                    forced: false,
                });
            }
        }
    }
    Ok(MatchAssignment { per_prior, forced })
}
