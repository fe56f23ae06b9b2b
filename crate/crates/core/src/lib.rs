//! Online action-tube construction and prediction.
//!
//! The crate turns a stream of micro-tube detections (pairs of boxes at frames
//! `t` and `t + delta`, optionally carrying predicted past/future boxes) into
//! class-labelled action tubes, completes those tubes up to the end of the
//! video, and scores the result with the usual spatio-temporal detection
//! metrics swept over the fraction of the video that was observed.
//!
//! Module map:
//!
//! - [`geometry`]: box algebra, offset codec, clipping and extrapolation.
//! - [`anchors`]: prior boxes and ground-truth to prior matching.
//! - [`losses`]: the multi-task training objective as pure functions.
//! - [`linking`]: per-class NMS and online micro-tube linking.
//! - [`prediction`]: future-tube assembly and early labelling.
//! - [`metrics`]: tube IoU, AP/mAP and the observation-percentage sweep.
//! - [`dataio`]: detection, manifest, tube and report file formats.
//! - [`synth`]: seeded synthetic scenarios used as an end-to-end oracle.

pub mod anchors;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod linking;
pub mod losses;
pub mod metrics;
pub mod prediction;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, FrameSize};
