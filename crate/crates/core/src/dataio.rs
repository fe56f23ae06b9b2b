//! File formats.
//!
//! - Detections: JSON lines, one micro-tube per line, absolute pixel
//!   coordinates.
//! - Dataset manifest: one JSON document with class names and, per video,
//!   frame count, frame size and ground-truth tubes.
//! - Tubes: one JSON document with the linked (and possibly completed)
//!   tubes of every video.
//! - Reports: CSV with header `metric,delta,observed_pct,class,value`.
//! - Sweep tables: CSV with header `model,metric,delta,observed_pct,value`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameSize};
use crate::linking::{ActionTube, MicroTubeDetection, PredictionPayload};
use crate::metrics::{ClassKey, EvalReport, GroundTruthTube, MetricKind, Threshold};
use crate::prediction::PredictionHorizon;

/// Micro-tube detections per video id, each sorted by `t`.
pub type DetectionStream = BTreeMap<String, Vec<MicroTubeDetection>>;

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video: String,
    pub t: u32,
    pub delta: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<PredictionHorizon>,
    /// `x_min, y_min, x_max, y_max` at `t`, then at `t + delta`.
    pub boxes: Vec<f64>,
    /// Past box then the `n` future boxes, 4 values each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Vec<f64>>,
    pub scores: Vec<f64>,
}

fn boxes_from(coords: &[f64]) -> Result<Vec<BoundingBox>> {
    coords
        .chunks_exact(4)
        .map(|c| BoundingBox::new(c[0], c[1], c[2], c[3]))
        .collect()
}

impl DetectionRecord {
    pub fn from_detection(video: &str, d: &MicroTubeDetection) -> Self {
        let boxes = d.boxes.iter().flat_map(|b| b.coords()).collect();
        let (horizon, prediction) = match &d.prediction {
            Some(p) => (
                Some(p.horizon),
                Some(
                    std::iter::once(&p.past)
                        .chain(&p.future)
                        .flat_map(|b| b.coords())
                        .collect(),
                ),
            ),
            None => (None, None),
        };
        Self {
            video: video.to_owned(),
            t: d.t,
            delta: d.delta,
            horizon,
            boxes,
            prediction,
            scores: d.scores.clone(),
        }
    }

    pub fn to_detection(&self) -> Result<MicroTubeDetection> {
        if self.boxes.len() != 8 {
            return Err(Error::DimensionMismatch(format!(
                "expected 8 micro-tube coordinates, got {}",
                self.boxes.len()
            )));
        }
        let b = boxes_from(&self.boxes)?;
        let prediction = match (&self.prediction, self.horizon) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::InvalidConfig(
                    "prediction coordinates without a horizon".into(),
                ))
            }
            (Some(coords), Some(h)) => {
                if coords.len() != h.coord_len() {
                    return Err(Error::DimensionMismatch(format!(
                        "horizon {},{},{} needs {} prediction coordinates, got {}",
                        h.delta_p,
                        h.delta_f,
                        h.n,
                        h.coord_len(),
                        coords.len()
                    )));
                }
                let mut boxes = boxes_from(coords)?;
                let future = boxes.split_off(1);
                Some(PredictionPayload::new(h, boxes[0], future)?)
            }
        };
        MicroTubeDetection::new(
            self.t,
            self.delta,
            [b[0], b[1]],
            self.scores.clone(),
            prediction,
        )
    }
}

fn parse_error(path: &str, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.to_string(),
    }
}

/// Parses a detections stream; `source` names the input in errors.
pub fn parse_detections<R: Read>(reader: R, source: &str) -> Result<DetectionStream> {
    let mut out = DetectionStream::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| parse_error(source, lineno, e))?;
        let det = record
            .to_detection()
            .map_err(|e| parse_error(source, lineno, e))?;
        let stream = out.entry(record.video).or_default();
        if let Some(prev) = stream.last() {
            if det.t < prev.t {
                return Err(parse_error(
                    source,
                    lineno,
                    format!("t={} follows t={} for the same video", det.t, prev.t),
                ));
            }
        }
        stream.push(det);
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionStream> {
    let path = path.as_ref();
    parse_detections(File::open(path)?, &path.display().to_string())
}

pub fn format_detections<W: Write>(stream: &DetectionStream, mut writer: W) -> Result<()> {
    for (video, dets) in stream {
        for d in dets {
            serde_json::to_writer(&mut writer, &DetectionRecord::from_detection(video, d))?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_detections(path: impl AsRef<Path>, stream: &DetectionStream) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    format_detections(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub num_frames: u32,
    pub frame: FrameSize,
    pub tubes: Vec<GroundTruthTube>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest("no classes".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if c == "mean" || !names.insert(c) {
                return Err(Error::Manifest(format!(
                    "class name '{c}' is reserved or repeated"
                )));
            }
        }
        let mut ids = HashSet::new();
        for v in &self.videos {
            if !ids.insert(&v.id) {
                return Err(Error::Manifest(format!("duplicate video id '{}'", v.id)));
            }
            if v.num_frames == 0 {
                return Err(Error::Manifest(format!("video '{}' has no frames", v.id)));
            }
            for (k, t) in v.tubes.iter().enumerate() {
                if t.class_id >= self.classes.len() {
                    return Err(Error::Manifest(format!(
                        "video '{}' tube {k}: unknown class id {}",
                        v.id, t.class_id
                    )));
                }
                if t.boxes.is_empty() || t.start_frame == 0 || t.end_frame() > v.num_frames {
                    return Err(Error::Manifest(format!(
                        "video '{}' tube {k}: frames outside [1, {}]",
                        v.id, v.num_frames
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(text)?;
    m.validate()?;
    Ok(m)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Json(j) => parse_error(&path.display().to_string(), j.line(), j),
        other => other,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTubes {
    pub id: String,
    /// Last observed frame.
    pub observed: u32,
    pub num_frames: u32,
    pub tubes: Vec<ActionTube>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TubesFile {
    pub videos: Vec<VideoTubes>,
}

pub fn write_tubes(path: impl AsRef<Path>, tubes: &TubesFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, tubes)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_tubes(path: impl AsRef<Path>) -> Result<TubesFile> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub const REPORT_HEADER: [&str; 5] = ["metric", "delta", "observed_pct", "class", "value"];
pub const SWEEP_HEADER: [&str; 5] = ["model", "metric", "delta", "observed_pct", "value"];

/// One CSV row of a report, with the class already resolved to its name.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: MetricKind,
    pub threshold: Threshold,
    pub observed_pct: u32,
    pub class: String,
    pub value: f64,
}

pub fn report_rows(report: &EvalReport) -> Vec<ReportRow> {
    report
        .cells
        .iter()
        .map(|(k, v)| ReportRow {
            metric: k.metric,
            threshold: k.threshold,
            observed_pct: k.observed_pct,
            class: match k.class {
                ClassKey::Class(c) => report
                    .class_names
                    .get(c)
                    .cloned()
                    .unwrap_or_else(|| c.to_string()),
                ClassKey::Mean => "mean".to_owned(),
            },
            value: *v,
        })
        .collect()
}

pub fn format_report<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for r in report_rows(report) {
        w.write_record([
            r.metric.name().to_owned(),
            r.threshold.to_string(),
            r.observed_pct.to_string(),
            r.class,
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    format_report(report, File::create(path)?)
}

pub fn parse_report<R: Read>(reader: R, source: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(parse_error(source, 1, "unexpected report header"));
    }
    let mut rows = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        let bad = |what: &str| parse_error(source, line, format!("bad {what}"));
        if rec.len() != 5 {
            return Err(bad("field count"));
        }
        rows.push(ReportRow {
            metric: MetricKind::parse(&rec[0]).ok_or_else(|| bad("metric"))?,
            threshold: Threshold::parse(&rec[1]).ok_or_else(|| bad("delta"))?,
            observed_pct: rec[2].parse().map_err(|_| bad("observed_pct"))?,
            class: rec[3].to_owned(),
            value: rec[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    parse_report(File::open(path)?, &path.display().to_string())
}

/// One point of a metric-versus-observation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub metric: MetricKind,
    pub threshold: Threshold,
    pub observed_pct: u32,
    pub value: f64,
}

/// Class-mean curves of accuracy, online mAP, p-mAP and c-mAP at
/// δ ∈ {0.2, 0.5, 0.75, avg}, one point per observation percentage.
pub fn sweep_rows(model: &str, report: &EvalReport) -> Vec<SweepRow> {
    let metrics = [
        MetricKind::Accuracy,
        MetricKind::OnlineMap,
        MetricKind::PMap,
        MetricKind::CMap,
    ];
    let thresholds = [
        Threshold::at(0.2),
        Threshold::at(0.5),
        Threshold::at(0.75),
        Threshold::Average,
    ];
    report
        .cells
        .iter()
        .filter(|(k, _)| {
            k.class == ClassKey::Mean
                && metrics.contains(&k.metric)
                && (k.metric == MetricKind::Accuracy || thresholds.contains(&k.threshold))
        })
        .map(|(k, v)| SweepRow {
            model: model.to_owned(),
            metric: k.metric,
            threshold: k.threshold,
            observed_pct: k.observed_pct,
            value: *v,
        })
        .collect()
}

pub fn format_sweep<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.metric.name().to_owned(),
            r.threshold.to_string(),
            r.observed_pct.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_sweep<R: Read>(reader: R, source: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().collect::<Vec<_>>() != SWEEP_HEADER {
        return Err(parse_error(source, 1, "unexpected sweep header"));
    }
    let mut rows = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        let bad = |what: &str| parse_error(source, line, format!("bad {what}"));
        if rec.len() != 5 {
            return Err(bad("field count"));
        }
        rows.push(SweepRow {
            model: rec[0].to_owned(),
            metric: MetricKind::parse(&rec[1]).ok_or_else(|| bad("metric"))?,
            threshold: Threshold::parse(&rec[2]).ok_or_else(|| bad("delta"))?,
            observed_pct: rec[3].parse().map_err(|_| bad("observed_pct"))?,
            value: rec[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}
