//! Box algebra shared by every other module.
//!
//! Boxes are half-open pixel extents with real-valued corners, so the area of
//! `(x_min, y_min, x_max, y_max)` is `(x_max - x_min) * (y_max - y_min)`.
//! Zero-width or zero-height boxes are valid values: they show up when a box
//! is clipped entirely out of the frame and they have IoU 0 with everything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from its center and size. Negative sizes are rejected.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Image extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct FrameSize {
    width: u32,
    height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "frame size {width}x{height} must be at least 1x1"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

impl TryFrom<(u32, u32)> for FrameSize {
    type Error = Error;

    fn try_from((w, h): (u32, u32)) -> Result<Self> {
        Self::new(w, h)
    }
}

impl From<FrameSize> for (u32, u32) {
    fn from(f: FrameSize) -> Self {
        (f.width, f.height)
    }
}

/// Scaling applied to center and size offsets by the offset codec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Variances {
    pub fn new(center: f64, size: f64) -> Result<Self> {
        if !(center > 0.0 && size > 0.0 && center.is_finite() && size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "variances ({center}, {size}) must be positive"
            )));
        }
        Ok(Self { center, size })
    }
}

impl Default for Variances {
    fn default() -> Self {
        Self {
            center: 0.1,
            size: 0.2,
        }
    }
}

/// Center-size regression target of a box relative to a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetCode {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
    pub variances: Variances,
}

impl OffsetCode {
    pub fn to_array(&self) -> [f64; 4] {
        [self.d_cx, self.d_cy, self.d_w, self.d_h]
    }
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Mean IoU between one box and every box of a micro-tube.
pub fn mean_iou(prior: &BoundingBox, boxes: &[BoundingBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::EmptyMicroTube);
    }
    Ok(boxes.iter().map(|g| iou(prior, g)).sum::<f64>() / boxes.len() as f64)
}

/// Mean of the per-frame IoUs of two equally long box sequences.
pub fn paired_mean_iou(a: &[BoundingBox], b: &[BoundingBox]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyMicroTube);
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "micro-tubes of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| iou(x, y)).sum::<f64>() / a.len() as f64)
}

pub fn encode_offsets(
    target: &BoundingBox,
    prior: &BoundingBox,
    variances: Variances,
) -> Result<OffsetCode> {
    if target.is_degenerate() || prior.is_degenerate() {
        return Err(Error::DegenerateBox);
    }
    let (cx, cy) = target.center();
    let (pcx, pcy) = prior.center();
    let (pw, ph) = (prior.width(), prior.height());
    Ok(OffsetCode {
        d_cx: (cx - pcx) / (pw * variances.center),
        d_cy: (cy - pcy) / (ph * variances.center),
        d_w: (target.width() / pw).ln() / variances.size,
        d_h: (target.height() / ph).ln() / variances.size,
        variances,
    })
}

pub fn decode_offsets(code: &OffsetCode, prior: &BoundingBox) -> Result<BoundingBox> {
    if !code.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteCode);
    }
    if prior.is_degenerate() {
        return Err(Error::DegenerateBox);
    }
    let v = code.variances;
    let (pcx, pcy) = prior.center();
    let (pw, ph) = (prior.width(), prior.height());
    let cx = pcx + code.d_cx * v.center * pw;
    let cy = pcy + code.d_cy * v.center * ph;
    let w = pw * (code.d_w * v.size).exp();
    let h = ph * (code.d_h * v.size).exp();
    BoundingBox::from_center(cx, cy, w, h).map_err(|_| Error::NonFiniteCode)
}

/// Clamps every coordinate into `[0, width] x [0, height]`.
pub fn clip_box(b: &BoundingBox, frame: FrameSize) -> BoundingBox {
    let w = f64::from(frame.width);
    let h = f64::from(frame.height);
    // Clamping is monotone, so ordering of the corners survives.
    BoundingBox {
        x_min: b.x_min.clamp(0.0, w),
        y_min: b.y_min.clamp(0.0, h),
        x_max: b.x_max.clamp(0.0, w),
        y_max: b.y_max.clamp(0.0, h),
    }
}

/// Number of trailing history boxes used to estimate velocity.
pub const VELOCITY_WINDOW: usize = 5;

/// Per-coordinate velocity (pixels per frame) over the last
/// [`VELOCITY_WINDOW`] entries of a time-ordered history.
pub fn average_velocity(history: &[(u32, BoundingBox)]) -> Result<[f64; 4]> {
    if history.len() < 2 {
        return Err(Error::InsufficientHistory(history.len()));
    }
    let window = &history[history.len() - history.len().min(VELOCITY_WINDOW)..];
    let mut sum = [0.0; 4];
    for pair in window.windows(2) {
        let (f0, b0) = pair[0];
        let (f1, b1) = pair[1];
        if f1 <= f0 {
            return Err(Error::TemporalDiscontinuity(format!(
                "history frames {f0} and {f1} are not increasing"
            )));
        }
        let gap = f64::from(f1 - f0);
        let (c0, c1) = (b0.coords(), b1.coords());
        for k in 0..4 {
            sum[k] += (c1[k] - c0[k]) / gap;
        }
    }
    let steps = (window.len() - 1) as f64;
    Ok(sum.map(|s| s / steps))
}

/// Continues a box history at constant velocity to each target frame, then
/// clips the result to the frame.
pub fn extrapolate(
    history: &[(u32, BoundingBox)],
    targets: &[u32],
    frame: FrameSize,
) -> Result<Vec<BoundingBox>> {
    let velocity = average_velocity(history)?;
    let (last_frame, last) = history[history.len() - 1];
    targets
        .iter()
        .map(|&target| {
            if target <= last_frame {
                return Err(Error::TargetNotAfterHistory {
                    target,
                    last: last_frame,
                });
            }
            let gap = f64::from(target - last_frame);
            let c = last.coords();
            let moved: [f64; 4] = std::array::from_fn(|k| c[k] + velocity[k] * gap);
            Ok(clip_box(&collapse_inverted(moved)?, frame))
        })
        .collect()
}

// A shrinking box can overshoot past zero size; collapse such an axis to its
// midpoint instead of producing an inverted box.
fn collapse_inverted(c: [f64; 4]) -> Result<BoundingBox> {
    let (x0, x1) = if c[0] > c[2] {
        let m = (c[0] + c[2]) / 2.0;
        (m, m)
    } else {
        (c[0], c[2])
    };
    let (y0, y1) = if c[1] > c[3] {
        let m = (c[1] + c[3]) / 2.0;
        (m, m)
    } else {
        (c[1], c[3])
    };
    BoundingBox::new(x0, y0, x1, y1)
}

/// Linear interpolation between two boxes, `alpha` in `[0, 1]`.
pub fn lerp(a: &BoundingBox, b: &BoundingBox, alpha: f64) -> BoundingBox {
    let (ca, cb) = (a.coords(), b.coords());
    let c: [f64; 4] = std::array::from_fn(|k| ca[k] + (cb[k] - ca[k]) * alpha);
    // Convex combination of two valid boxes is valid.
    BoundingBox {
        x_min: c[0],
        y_min: c[1],
        x_max: c[2].max(c[0]),
        y_max: c[3].max(c[1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn rejects_inverted_and_non_finite() {
        assert!(BoundingBox::new(10.0, 0.0, 5.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 5.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::INFINITY, 5.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_relative_eq!(
            iou(&a, &bb(5.0, 0.0, 15.0, 10.0)),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(iou(&a, &bb(3.0, 3.0, 3.0, 8.0)), 0.0);
    }

    #[test]
    fn mean_iou_examples() {
        let p = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(mean_iou(&p, &[p, p]).unwrap(), 1.0);
        let far = bb(50.0, 50.0, 60.0, 60.0);
        assert_eq!(mean_iou(&p, &[far, far]).unwrap(), 0.0);
        let m = mean_iou(&p, &[p, bb(5.0, 0.0, 15.0, 10.0)]).unwrap();
        assert_relative_eq!(m, 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(mean_iou(&p, &[]), Err(Error::EmptyMicroTube)));
    }

    #[test]
    fn encode_examples() {
        let v = Variances::default();
        let p = bb(0.0, 0.0, 10.0, 10.0);
        let code = encode_offsets(&p, &p, v).unwrap();
        assert_eq!(code.to_array(), [0.0; 4]);

        let code = encode_offsets(&bb(0.0, 0.0, 20.0, 20.0), &p, v).unwrap();
        // centers 10 vs 5 over prior width 10 and variance 0.1
        assert_relative_eq!(code.d_cx, 5.0, epsilon = 1e-12);
        assert_relative_eq!(code.d_cy, 5.0, epsilon = 1e-12);
        assert_relative_eq!(code.d_w, 2f64.ln() / 0.2, epsilon = 1e-12);
        let back = decode_offsets(&code, &p).unwrap();
        for (x, y) in back.coords().iter().zip([0.0, 0.0, 20.0, 20.0]) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }

        assert!(matches!(
            encode_offsets(&bb(1.0, 1.0, 1.0, 5.0), &p, v),
            Err(Error::DegenerateBox)
        ));
        assert!(matches!(
            encode_offsets(&p, &bb(1.0, 1.0, 4.0, 1.0), v),
            Err(Error::DegenerateBox)
        ));
    }

    #[test]
    fn decode_rejects_non_finite() {
        let code = OffsetCode {
            d_cx: f64::NAN,
            d_cy: 0.0,
            d_w: 0.0,
            d_h: 0.0,
            variances: Variances::default(),
        };
        assert!(matches!(
            decode_offsets(&code, &bb(0.0, 0.0, 1.0, 1.0)),
            Err(Error::NonFiniteCode)
        ));
    }

    #[test]
    fn clip_examples() {
        let f = FrameSize::new(320, 240).unwrap();
        let inside = bb(10.0, 10.0, 50.0, 50.0);
        assert_eq!(clip_box(&inside, f), inside);
        assert_eq!(
            clip_box(&bb(-5.0, -5.0, 10.0, 10.0), f),
            bb(0.0, 0.0, 10.0, 10.0)
        );
        assert_eq!(
            clip_box(&bb(300.0, 0.0, 400.0, 100.0), f),
            bb(300.0, 0.0, 320.0, 100.0)
        );
        // Entirely outside: kept as a zero-width box on the edge.
        let gone = clip_box(&bb(400.0, 10.0, 500.0, 20.0), f);
        assert_eq!(gone, bb(320.0, 10.0, 320.0, 20.0));
    }

    #[test]
    fn extrapolate_examples() {
        let f = FrameSize::new(320, 240).unwrap();
        let still: Vec<_> = (1..=5).map(|t| (t, bb(10.0, 10.0, 20.0, 20.0))).collect();
        let out = extrapolate(&still, &[6, 9], f).unwrap();
        assert!(out.iter().all(|b| *b == bb(10.0, 10.0, 20.0, 20.0)));

        let moving: Vec<_> = (1..=5u32)
            .map(|t| {
                let x = 2.0 * f64::from(t);
                (t, bb(x, 10.0, x + 10.0, 20.0))
            })
            .collect();
        let out = extrapolate(&moving, &[8], f).unwrap();
        assert_relative_eq!(out[0].x_min(), 10.0 + 6.0, epsilon = 1e-12);
        assert_relative_eq!(out[0].x_max(), 20.0 + 6.0, epsilon = 1e-12);

        let fast: Vec<_> = (1..=3u32)
            .map(|t| {
                let x = 250.0 + 20.0 * f64::from(t);
                (t, bb(x, 10.0, x + 40.0, 20.0))
            })
            .collect();
        let out = extrapolate(&fast, &[5], f).unwrap();
        assert_eq!(out[0].x_max(), 320.0);

        assert!(matches!(
            extrapolate(&moving[..1], &[8], f),
            Err(Error::InsufficientHistory(1))
        ));
        assert!(extrapolate(&moving, &[5], f).is_err());
    }

    #[test]
    fn extrapolate_uses_only_last_five() {
        let f = FrameSize::new(1000, 1000).unwrap();
        // Large jump early, then constant: the window must ignore the jump.
        let mut h = vec![(1u32, bb(0.0, 0.0, 10.0, 10.0))];
        for t in 2..=7u32 {
            h.push((t, bb(100.0, 0.0, 110.0, 10.0)));
        }
        let out = extrapolate(&h, &[10], f).unwrap();
        assert_eq!(out[0], bb(100.0, 0.0, 110.0, 10.0));
    }

    #[test]
    fn shrinking_box_collapses_instead_of_inverting() {
        let f = FrameSize::new(100, 100).unwrap();
        let h = vec![
            (1, bb(40.0, 40.0, 60.0, 60.0)),
            (2, bb(45.0, 45.0, 55.0, 55.0)),
        ];
        let out = extrapolate(&h, &[10], f).unwrap();
        assert_eq!(out[0].width(), 0.0);
        assert_eq!(out[0].center(), (50.0, 50.0));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..200.0f64, 0.0..200.0f64, 0.5..100.0f64, 0.5..100.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn codec_roundtrip(b in arb_box(), p in arb_box()) {
            let code = encode_offsets(&b, &p, Variances::default()).unwrap();
            let back = decode_offsets(&code, &p).unwrap();
            for (x, y) in back.coords().iter().zip(b.coords()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }

        #[test]
        fn clip_idempotent_and_bounded(
            x in -300.0..600.0f64, y in -300.0..600.0f64,
            w in 0.0..400.0f64, h in 0.0..400.0f64,
        ) {
            let f = FrameSize::new(320, 240).unwrap();
            let c = clip_box(&bb(x, y, x + w, y + h), f);
            prop_assert_eq!(clip_box(&c, f), c);
            prop_assert!(c.x_min() >= 0.0 && c.x_max() <= 320.0);
            prop_assert!(c.y_min() >= 0.0 && c.y_max() <= 240.0);
            prop_assert!(c.x_min() <= c.x_max() && c.y_min() <= c.y_max());
        }

        #[test]
        fn extrapolate_continues_affine_motion(
            start in arb_box(),
            v in prop::array::uniform4(-3.0..3.0f64),
            len in 2usize..9,
            ahead in 1u32..20,
        ) {
            let big = FrameSize::new(100_000, 100_000).unwrap();
            let at = |t: u32| {
                let c = start.coords();
                let k = f64::from(t);
                let grow = (v[2] - v[0]).max(0.0);
                let grow_y = (v[3] - v[1]).max(0.0);
                bb(
                    1000.0 + c[0] + v[0] * k,
                    1000.0 + c[1] + v[1] * k,
                    1000.0 + c[2] + (v[0] + grow) * k,
                    1000.0 + c[3] + (v[1] + grow_y) * k,
                )
            };
            let history: Vec<_> = (1..=len as u32).map(|t| (t, at(t))).collect();
            let target = len as u32 + ahead;
            let out = extrapolate(&history, &[target], big).unwrap();
            for (x, y) in out[0].coords().iter().zip(at(target).coords()) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
