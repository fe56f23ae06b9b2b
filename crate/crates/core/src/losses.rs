//! Multi-task training objective.
//!
//! `total = (l_cls + alpha * l_reg + beta * l_pred) / max(N, 1)` where `N` is
//! the number of matched priors. `l_cls` is softmax cross-entropy over the
//! matched priors plus the mined hard negatives, `l_reg` is smooth-L1 on the
//! eight micro-tube offsets, and `l_pred` is smooth-L1 on the past/future
//! offsets that have ground truth available.
//!
//! Class index 0 is background; action class `c` is index `c + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{MatchAssignment, PriorBoxSet};
use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, BoundingBox};
use crate::prediction::PredictionHorizon;

pub const DEFAULT_NEGATIVE_RATIO: f64 = 3.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 1.0;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} values, target has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum())
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_len(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                d
            } else {
                d.signum()
            }
        })
        .collect())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // -log p = ln(1 + rest / own); ln_1p keeps precision when the label dominates.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .map(|(k, l)| if k == label { 0.0 } else { (l - max).exp() })
        .sum();
    let own = (logits[label] - max).exp();
    if own == 0.0 {
        return Ok(max - logits[label] + rest.ln());
    }
    Ok((rest / own).ln_1p())
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits:
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_softmax(logits)
        .into_iter()
        .enumerate()
        .map(|(k, ls)| ls.exp() - if k == label { 1.0 } else { 0.0 })
        .collect())
}

/// Picks the `floor(ratio * n_matched)` negatives with the highest loss
/// (at least one when nothing matched), ties to the lower prior index.
/// `candidates` are `(prior index, background loss)` pairs.
pub fn hard_negative_mining(
    candidates: &[(usize, f64)],
    n_matched: usize,
    ratio: f64,
) -> Vec<usize> {
    let quota = if n_matched == 0 {
        1
    } else {
        (ratio * n_matched as f64).floor() as usize
    };
    let mut order: Vec<(usize, f64)> = candidates.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(quota).map(|(i, _)| i).collect()
}

/// Encoded regression targets for one matched prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTarget {
    pub micro_tube: [f64; 8],
    /// `4 * (1 + n)` values: the past box, then the `n` future boxes.
    pub prediction: Vec<f64>,
    /// One flag per box in `prediction`.
    pub available: Vec<bool>,
}

/// Ground truth for one training micro-tube.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTube {
    pub micro_tube: [BoundingBox; 2],
    /// Past box followed by the `n` future boxes; `None` where the video has
    /// no ground truth (before the first or after the last frame).
    pub past_future: Vec<Option<BoundingBox>>,
}

/// Encodes the targets of every matched prior against that prior.
pub fn encode_targets(
    priors: &PriorBoxSet,
    assignment: &MatchAssignment,
    tubes: &[TrainingTube],
) -> Result<Vec<Option<PriorTarget>>> {
    if assignment.num_priors() != priors.len() {
        return Err(Error::DimensionMismatch(format!(
            "assignment covers {} priors, set has {}",
            assignment.num_priors(),
            priors.len()
        )));
    }
    let v = priors.variances();
    assignment
        .per_prior()
        .iter()
        .zip(priors.boxes())
        .map(|(m, prior)| {
            let Some(m) = m else { return Ok(None) };
            let tube = tubes.get(m.gt).ok_or_else(|| {
                Error::DimensionMismatch(format!("match refers to missing tube {}", m.gt))
            })?;
            let a = encode_offsets(&tube.micro_tube[0], prior, v)?.to_array();
            let b = encode_offsets(&tube.micro_tube[1], prior, v)?.to_array();
            let mut micro_tube = [0.0; 8];
            micro_tube[..4].copy_from_slice(&a);
            micro_tube[4..].copy_from_slice(&b);
            let mut prediction = Vec::with_capacity(4 * tube.past_future.len());
            let mut available = Vec::with_capacity(tube.past_future.len());
            for b in &tube.past_future {
                match b {
                    Some(b) => {
                        prediction.extend(encode_offsets(b, prior, v)?.to_array());
                        available.push(true);
                    }
                    None => {
                        prediction.extend([0.0; 4]);
                        available.push(false);
                    }
                }
            }
            Ok(Some(PriorTarget {
                micro_tube,
                prediction,
                available,
            }))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    /// Number of action classes `C`; logits have `C + 1` entries.
    pub num_classes: usize,
    pub horizon: PredictionHorizon,
    pub logits: Vec<Vec<f64>>,
    pub micro_tube: Vec<[f64; 8]>,
    pub prediction: Vec<Vec<f64>>,
    pub assignment: &'a MatchAssignment,
    /// Aligned with priors; `Some` exactly for matched priors.
    pub targets: Vec<Option<PriorTarget>>,
    pub alpha: f64,
    pub beta: f64,
    pub negative_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_pred: f64,
    pub n_matched: usize,
}

impl LossInputs<'_> {
    fn validate(&self) -> Result<()> {
        let p = self.assignment.num_priors();
        let pred_len = 4 * (1 + self.horizon.n as usize);
        let dims = |what: &str, got: usize| {
            Error::DimensionMismatch(format!("{what}: expected {p} priors, got {got}"))
        };
        if self.logits.len() != p {
            return Err(dims("logits", self.logits.len()));
        }
        if self.micro_tube.len() != p {
            return Err(dims("micro-tube outputs", self.micro_tube.len()));
        }
        if self.prediction.len() != p {
            return Err(dims("prediction outputs", self.prediction.len()));
        }
        if self.targets.len() != p {
            return Err(dims("targets", self.targets.len()));
        }
        if let Some(l) = self.logits.iter().find(|l| l.len() != self.num_classes + 1) {
            return Err(Error::DimensionMismatch(format!(
                "logits of length {} for {} classes",
                l.len(),
                self.num_classes
            )));
        }
        if let Some(z) = self.prediction.iter().find(|z| z.len() != pred_len) {
            return Err(Error::DimensionMismatch(format!(
                "prediction output of length {}, horizon needs {pred_len}",
                z.len()
            )));
        }
        for (m, t) in self.assignment.per_prior().iter().zip(&self.targets) {
            match (m, t) {
                (Some(_), Some(t)) => {
                    if t.prediction.len() != pred_len
                        || t.available.len() != 1 + self.horizon.n as usize
                    {
                        return Err(Error::DimensionMismatch(
                            "prediction target does not match horizon".into(),
                        ));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::DimensionMismatch(
                        "targets must be present exactly for matched priors".into(),
                    ))
                }
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(
                "alpha and beta must be non-negative".into(),
            ));
        }
        if self.negative_ratio.is_nan() || self.negative_ratio <= 0.0 {
            return Err(Error::InvalidConfig(
                "negative ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn total_loss(inputs: &LossInputs<'_>) -> Result<LossBreakdown> {
    inputs.validate()?;
    let n_matched = inputs.assignment.n_matched();
    let mut l_cls = 0.0;
    let mut l_reg = 0.0;
    let mut l_pred = 0.0;
    let mut negatives = Vec::new();
    for (i, m) in inputs.assignment.per_prior().iter().enumerate() {
        match m {
            Some(m) => {
                let target = inputs.targets[i].as_ref().expect("validated");
                l_cls += softmax_cross_entropy(&inputs.logits[i], m.class_id + 1)?;
                l_reg += smooth_l1(&inputs.micro_tube[i], &target.micro_tube)?;
                for (k, &avail) in target.available.iter().enumerate() {
                    // The past slot is only trained when a past offset is set.
                    if !avail || (k == 0 && inputs.horizon.delta_p == 0) {
                        continue;
                    }
                    let span = 4 * k..4 * k + 4;
                    l_pred += smooth_l1(
                        &inputs.prediction[i][span.clone()],
                        &target.prediction[span],
                    )?;
                }
            }
            None => negatives.push((i, softmax_cross_entropy(&inputs.logits[i], 0)?)),
        }
    }
    let lookup: std::collections::HashMap<usize, f64> = negatives.iter().copied().collect();
    for i in hard_negative_mining(&negatives, n_matched, inputs.negative_ratio) {
        l_cls += lookup[&i];
    }
    let total = (l_cls + inputs.alpha * l_reg + inputs.beta * l_pred) / n_matched.max(1) as f64;
    Ok(LossBreakdown {
        total,
        l_cls,
        l_reg,
        l_pred,
        n_matched,
    })
}

/// Worst relative error between an analytic gradient and central finite
/// differences at `x`.
pub fn grad_check<F, G>(f: F, grad: G, x: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(x);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        probe[k] = x[k] + epsilon;
        let up = f(&probe);
        probe[k] = x[k] - epsilon;
        let down = f(&probe);
        probe[k] = x[k];
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    worst
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub smooth_l1_max_rel_err: f64,
    pub cross_entropy_max_rel_err: f64,
    pub points_checked: usize,
    /// Coordinates within `kink_margin` of `|d| = 1`, where smooth-L1 has no
    /// derivative.
    pub kink_points_skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.smooth_l1_max_rel_err
            .max(self.cross_entropy_max_rel_err)
    }
}

/// Gradient check of both loss primitives on seeded random points.
pub fn check_loss_gradients(seed: u64, trials: usize, epsilon: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kink_margin = 1e3 * epsilon;
    let mut report = GradCheckReport {
        smooth_l1_max_rel_err: 0.0,
        cross_entropy_max_rel_err: 0.0,
        points_checked: 0,
        kink_points_skipped: 0,
    };
    for _ in 0..trials {
        let target: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut pred: Vec<f64> = target
            .iter()
            .map(|t| t + rng.random_range(-3.0..3.0))
            .collect();
        for (p, t) in pred.iter_mut().zip(&target) {
            if ((*p - t).abs() - 1.0).abs() < kink_margin {
                report.kink_points_skipped += 1;
                *p = t + 0.5;
            }
        }
        let err = grad_check(
            |x| smooth_l1(x, &target).expect("same length"),
            |x| smooth_l1_grad(x, &target).expect("same length"),
            &pred,
            epsilon,
        );
        report.smooth_l1_max_rel_err = report.smooth_l1_max_rel_err.max(err);

        let classes = rng.random_range(2..23);
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = rng.random_range(0..classes);
        let err = grad_check(
            |x| softmax_cross_entropy(x, label).expect("label in range"),
            |x| softmax_cross_entropy_grad(x, label).expect("label in range"),
            &logits,
            epsilon,
        );
        report.cross_entropy_max_rel_err = report.cross_entropy_max_rel_err.max(err);
        report.points_checked += 2;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{match_priors, GroundTruthMicroTube};
    use crate::geometry::Variances;
    use approx::assert_relative_eq;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[-2.0], &[0.0]).unwrap(), 1.5);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        for c in [1usize, 4, 21] {
            let l = softmax_cross_entropy(&vec![0.3; c + 1], c / 2).unwrap();
            assert_relative_eq!(l, ((c + 1) as f64).ln(), epsilon = 1e-12);
        }
        let l = softmax_cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert_relative_eq!(l, (-20f64).exp().ln_1p(), max_relative = 1e-9);
        assert_relative_eq!(l, 2.061153622438558e-9, max_relative = 1e-9);
        let l = softmax_cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_stable_for_huge_logits() {
        let l = softmax_cross_entropy(&[1e4, -1e4, 0.0], 1).unwrap();
        assert_relative_eq!(l, 2e4, max_relative = 1e-12);
    }

    #[test]
    fn mining_examples() {
        let losses = [0.1, 0.9, 0.3, 0.8, 0.05, 0.7, 0.2, 0.6, 0.4, 0.5];
        let cand: Vec<_> = losses.iter().copied().enumerate().collect();
        // Sort oracle: indices of the three largest losses.
        let mut oracle: Vec<usize> = (0..10).collect();
        oracle.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap());
        assert_eq!(hard_negative_mining(&cand, 1, 3.0), oracle[..3].to_vec());
        assert_eq!(hard_negative_mining(&cand, 0, 3.0), vec![1]);
        assert_eq!(hard_negative_mining(&cand[..2], 5, 3.0).len(), 2);
        let tied = [(4, 0.5), (2, 0.5), (7, 0.5)];
        assert_eq!(hard_negative_mining(&tied, 0, 3.0), vec![2]);
    }

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    struct Fixture {
        priors: PriorBoxSet,
        assignment: MatchAssignment,
        targets: Vec<Option<PriorTarget>>,
    }

    fn fixture(n: u32, future_available: bool) -> Fixture {
        let priors = PriorBoxSet::new(
            vec![
                bb(0.0, 0.0, 10.0, 10.0),
                bb(20.0, 0.0, 30.0, 10.0),
                bb(40.0, 0.0, 50.0, 10.0),
                bb(60.0, 0.0, 70.0, 10.0),
                bb(80.0, 0.0, 90.0, 10.0),
            ],
            Variances::default(),
        )
        .unwrap();
        let g = [bb(1.0, 0.0, 11.0, 10.0), bb(2.0, 1.0, 12.0, 11.0)];
        let gts = [GroundTruthMicroTube {
            boxes: g.to_vec(),
            class_id: 1,
        }];
        let assignment = match_priors(&priors, &gts, 0.5).unwrap();
        let mut past_future = vec![Some(bb(0.0, 0.0, 10.0, 10.0))];
        for k in 1..=n {
            let last = k == n;
            past_future.push(if last && !future_available {
                None
            } else {
                Some(bb(f64::from(k), 0.0, 10.0 + f64::from(k), 10.0))
            });
        }
        let tubes = [TrainingTube {
            micro_tube: g,
            past_future,
        }];
        let targets = encode_targets(&priors, &assignment, &tubes).unwrap();
        Fixture {
            priors,
            assignment,
            targets,
        }
    }

    fn inputs<'a>(f: &'a Fixture, horizon: PredictionHorizon) -> LossInputs<'a> {
        let p = f.priors.len();
        let width = 4 * (1 + horizon.n as usize);
        LossInputs {
            num_classes: 2,
            horizon,
            logits: vec![vec![0.2, -0.1, 0.4]; p],
            micro_tube: vec![[0.3; 8]; p],
            prediction: vec![vec![-0.4; width]; p],
            assignment: &f.assignment,
            targets: f.targets.clone(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            negative_ratio: DEFAULT_NEGATIVE_RATIO,
        }
    }

    #[test]
    fn perfect_outputs_give_near_zero_loss() {
        let f = fixture(3, true);
        let h = PredictionHorizon::new(4, 5, 3).unwrap();
        let mut x = inputs(&f, h);
        for (i, t) in f.targets.iter().enumerate() {
            match t {
                Some(t) => {
                    x.micro_tube[i] = t.micro_tube;
                    x.prediction[i] = t.prediction.clone();
                    x.logits[i] = vec![0.0, 0.0, 50.0];
                }
                None => x.logits[i] = vec![50.0, 0.0, 0.0],
            }
        }
        let b = total_loss(&x).unwrap();
        assert_eq!(b.l_reg, 0.0);
        assert_eq!(b.l_pred, 0.0);
        assert!(b.total < 1e-12);
        assert_eq!(b.n_matched, 1);
    }

    #[test]
    fn masked_future_box_contributes_nothing() {
        let h = PredictionHorizon::new(4, 5, 3).unwrap();
        let full = fixture(3, true);
        let masked = fixture(3, false);
        let lf = total_loss(&inputs(&full, h)).unwrap();
        let lm = total_loss(&inputs(&masked, h)).unwrap();
        // Hand-computed term for the last future box of the matched prior.
        let i = full.assignment.forced_priors()[0];
        let t = full.targets[i].as_ref().unwrap();
        let term = smooth_l1(&[-0.4; 4], &t.prediction[12..16]).unwrap();
        assert_relative_eq!(lm.l_pred, lf.l_pred - term, epsilon = 1e-12);
        assert_eq!(lm.l_cls, lf.l_cls);
        assert_eq!(lm.l_reg, lf.l_reg);
    }

    #[test]
    fn zero_horizon_reduces_to_micro_tube_objective() {
        let f = fixture(0, true);
        let h = PredictionHorizon::new(0, 1, 0).unwrap();
        let b = total_loss(&inputs(&f, h)).unwrap();
        assert_eq!(b.l_pred, 0.0);
        assert_eq!(b.total, (b.l_cls + b.l_reg) / b.n_matched as f64);
    }

    #[test]
    fn alpha_scales_only_regression() {
        let f = fixture(3, true);
        let h = PredictionHorizon::new(4, 5, 3).unwrap();
        let mut x = inputs(&f, h);
        let base = total_loss(&x).unwrap();
        x.alpha = 3.0;
        let scaled = total_loss(&x).unwrap();
        let n = base.n_matched as f64;
        assert_relative_eq!(
            scaled.total - base.total,
            2.0 * base.l_reg / n,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dimension_errors() {
        let f = fixture(3, true);
        let h = PredictionHorizon::new(4, 5, 3).unwrap();
        let mut x = inputs(&f, h);
        x.logits[0].push(0.0);
        assert!(matches!(total_loss(&x), Err(Error::DimensionMismatch(_))));
        let mut x = inputs(&f, h);
        x.prediction[1].pop();
        assert!(matches!(total_loss(&x), Err(Error::DimensionMismatch(_))));
        let mut x = inputs(&f, h);
        x.targets[0] = x.targets.iter().flatten().next().cloned();
        x.targets[1] = None;
        x.targets[2] = None;
        if f.assignment.per_prior()[0].is_none() {
            assert!(matches!(total_loss(&x), Err(Error::DimensionMismatch(_))));
        }
    }

    #[test]
    fn no_matches_uses_unit_normaliser() {
        let f = fixture(1, true);
        let empty = MatchAssignment::unmatched(f.priors.len());
        let h = PredictionHorizon::new(0, 1, 1).unwrap();
        let mut x = inputs(&f, h);
        x.assignment = &empty;
        x.targets = vec![None; f.priors.len()];
        let b = total_loss(&x).unwrap();
        assert_eq!(b.n_matched, 0);
        // Exactly one mined negative.
        let one = softmax_cross_entropy(&[0.2, -0.1, 0.4], 0).unwrap();
        assert_relative_eq!(b.total, one, epsilon = 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let err = grad_check(
            |x| smooth_l1(x, &[0.0]).unwrap(),
            |x| smooth_l1_grad(x, &[0.0]).unwrap(),
            &[0.5],
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
        let report = check_loss_gradients(7, 200, 1e-6);
        assert!(report.cross_entropy_max_rel_err < 1e-6, "{report:?}");
        assert!(report.smooth_l1_max_rel_err < 1e-6, "{report:?}");
    }
}
