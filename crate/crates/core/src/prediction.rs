//! Future-tube assembly.
//!
//! Each linked micro-tube carries boxes for `n` future steps. Collected over
//! the members of a tube they give boxes up to `now - delta + n * delta_f`;
//! everything after that, and any frame no payload covers, is filled by
//! constant-velocity extrapolation and clipped to the frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, extrapolate, BoundingBox, FrameSize, VELOCITY_WINDOW};
use crate::linking::ActionTube;

/// `(delta_p, delta_f, n)`: past offset, future step and number of future
/// steps regressed per micro-tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32, u32)", into = "(u32, u32, u32)")]
pub struct PredictionHorizon {
    pub delta_p: u32,
    pub delta_f: u32,
    pub n: u32,
}

impl PredictionHorizon {
    pub fn new(delta_p: u32, delta_f: u32, n: u32) -> Result<Self> {
        if delta_f == 0 {
            return Err(Error::InvalidConfig(
                "future step must be at least 1".into(),
            ));
        }
        Ok(Self {
            delta_p,
            delta_f,
            n,
        })
    }

    /// Number of regressed prediction coordinates, `4 * (1 + n)`.
    pub fn coord_len(&self) -> usize {
        4 * (1 + self.n as usize)
    }
}

impl Default for PredictionHorizon {
    fn default() -> Self {
        Self {
            delta_p: 0,
            delta_f: 5,
            n: 3,
        }
    }
}

impl TryFrom<(u32, u32, u32)> for PredictionHorizon {
    type Error = Error;

    fn try_from((p, f, n): (u32, u32, u32)) -> Result<Self> {
        Self::new(p, f, n)
    }
}

impl From<PredictionHorizon> for (u32, u32, u32) {
    fn from(h: PredictionHorizon) -> Self {
        (h.delta_p, h.delta_f, h.n)
    }
}

impl std::str::FromStr for PredictionHorizon {
    type Err = Error;

    /// Parses `"delta_p,delta_f,n"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidConfig(format!("horizon '{s}' is not delta_p,delta_f,n"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<u32> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        Self::new(v[0], v[1], v[2])
    }
}

/// How overlapping future boxes from different micro-tubes are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    MostRecent,
    Average,
}

/// Future boxes contributed by the tube's member payloads on
/// `(now, now - delta + n * delta_f]`.
pub fn assemble_future(
    tube: &ActionTube,
    now: u32,
    horizon: PredictionHorizon,
    aggregation: Aggregation,
) -> Result<BTreeMap<u32, BoundingBox>> {
    let Some(last) = tube.members.last() else {
        return Err(Error::EmptyTube);
    };
    let mut out = BTreeMap::new();
    if horizon.n == 0 {
        return Ok(out);
    }
    let end = i64::from(now) - i64::from(last.delta) + i64::from(horizon.n * horizon.delta_f);
    let mut sources: BTreeMap<u32, Vec<(u32, BoundingBox)>> = BTreeMap::new();
    for m in &tube.members {
        let Some(payload) = &m.prediction else {
            continue;
        };
        if payload.horizon != horizon {
            return Err(Error::DimensionMismatch(format!(
                "payload horizon {:?} differs from {:?}",
                payload.horizon, horizon
            )));
        }
        for (f, b) in payload.future_frames(m.t) {
            if f > now && i64::from(f) <= end {
                sources.entry(f).or_default().push((m.t, b));
            }
        }
    }
    for (f, boxes) in sources {
        let b = match aggregation {
            Aggregation::MostRecent => boxes.iter().max_by_key(|(t, _)| *t).expect("non-empty").1,
            Aggregation::Average => {
                let mut sum = [0.0; 4];
                for (_, b) in &boxes {
                    for (s, c) in sum.iter_mut().zip(b.coords()) {
                        *s += c;
                    }
                }
                let k = boxes.len() as f64;
                BoundingBox::new(sum[0] / k, sum[1] / k, sum[2] / k, sum[3] / k)?
            }
        };
        out.insert(f, b);
    }
    Ok(out)
}

/// Completes a tube observed up to frame `now` with one predicted box for
/// every frame in `(now, video_length]`.
pub fn predict_full_tube(
    tube: &ActionTube,
    now: u32,
    video_length: u32,
    horizon: PredictionHorizon,
    frame: FrameSize,
    aggregation: Aggregation,
) -> Result<ActionTube> {
    let Some(last_detected) = tube.last_detected_frame() else {
        return Err(Error::EmptyTube);
    };
    if last_detected > now {
        return Err(Error::TemporalDiscontinuity(format!(
            "tube reaches frame {last_detected} but only {now} frames were observed"
        )));
    }
    let mut out = tube.clone();
    out.predicted.clear();
    if now >= video_length {
        return Ok(out);
    }
    let assembled = assemble_future(tube, now, horizon, aggregation)?;
    let mut sequence: Vec<(u32, BoundingBox)> =
        tube.detected.iter().map(|(f, b)| (*f, *b)).collect();
    let mut f = now + 1;
    while f <= video_length {
        if let Some(b) = assembled.get(&f) {
            sequence.push((f, clip_box(b, frame)));
            f += 1;
            continue;
        }
        // One constant-velocity run up to the next assembled box.
        let run_end = assembled
            .range(f..=video_length)
            .next()
            .map_or(video_length, |(g, _)| g - 1);
        let targets: Vec<u32> = (f..=run_end).collect();
        let window = &sequence[sequence.len().saturating_sub(VELOCITY_WINDOW)..];
        let boxes = extrapolate(window, &targets, frame)?;
        sequence.extend(targets.iter().copied().zip(boxes));
        f = run_end + 1;
    }
    out.predicted = sequence.into_iter().filter(|(f, _)| *f > now).collect();
    Ok(out)
}

/// Class of the highest-scoring tube; ties go to the lowest class id.
pub fn early_label(tubes: &[ActionTube]) -> Result<usize> {
    tubes
        .iter()
        .max_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(b.class_id.cmp(&a.class_id))
        })
        .map(|t| t.class_id)
        .ok_or(Error::NoTubes)
}
