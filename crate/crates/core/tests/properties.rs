use proptest::prelude::*;
use tubekit::anchors::{match_priors, GroundTruthMicroTube, PriorBoxSet};
use tubekit::geometry::{BoundingBox, Variances};
use tubekit::linking::nms;
use tubekit::losses::{encode_targets, total_loss, LossInputs, PriorTarget, TrainingTube};
use tubekit::metrics::{average_precision, tube_iou, FrameBoxes, GtTube, ScoredTube};
use tubekit::prediction::PredictionHorizon;

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..80.0f64, 0.0..80.0f64, 4.0..40.0f64, 4.0..40.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn tube() -> impl Strategy<Value = FrameBoxes> {
    (1u32..5, prop::collection::vec(bbox(), 1..5))
        .prop_map(|(start, boxes)| (start..).zip(boxes).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tube_iou_symmetric_and_reflexive(a in tube(), b in tube()) {
        prop_assert_eq!(tube_iou(&a, &b), tube_iou(&b, &a));
        prop_assert!((tube_iou(&a, &a) - 1.0).abs() < 1e-12);
        let v = tube_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn ap_invariant_under_monotone_rescoring(
        dets in prop::collection::vec((tube(), 0.0..1.0f64, 0usize..2), 0..6),
        gts in prop::collection::vec((tube(), 0usize..2), 1..4),
    ) {
        let gts: Vec<GtTube> = gts.into_iter().map(|(boxes, video)| GtTube { video, boxes }).collect();
        let scored: Vec<ScoredTube> = dets
            .iter()
            .map(|(boxes, score, video)| ScoredTube { video: *video, score: *score, boxes: boxes.clone() })
            .collect();
        let rescored: Vec<ScoredTube> = scored
            .iter()
            .map(|d| ScoredTube { score: (3.0 * d.score).exp() - 7.0, ..d.clone() })
            .collect();
        prop_assert_eq!(average_precision(&scored, &gts, 0.5), average_precision(&rescored, &gts, 0.5));
    }

    #[test]
    fn duplicate_true_positive_never_raises_ap(
        others in prop::collection::vec((tube(), 0.0..1.0f64), 0..5),
        gt in tube(),
        tp_score in 0.0..1.0f64,
        drop in 0.0..1.0f64,
    ) {
        let gts = [GtTube { video: 0, boxes: gt.clone() }];
        let mut dets: Vec<ScoredTube> = others
            .into_iter()
            .map(|(boxes, score)| ScoredTube { video: 0, score, boxes })
            .collect();
        dets.push(ScoredTube { video: 0, score: tp_score, boxes: gt.clone() });
        let before = average_precision(&dets, &gts, 0.5).unwrap();
        dets.push(ScoredTube { video: 0, score: tp_score - drop - 1e-9, boxes: gt });
        let after = average_precision(&dets, &gts, 0.5).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn nms_ignores_input_order(
        items in prop::collection::vec((bbox(), bbox(), 0.0..1.0f64), 0..20),
        seed in any::<u64>(),
    ) {
        let tubes: Vec<[BoundingBox; 2]> = items.iter().map(|(a, b, _)| [*a, *b]).collect();
        let scores: Vec<f64> = items.iter().map(|(_, _, s)| *s).collect();
        let mut kept = nms(&tubes, &scores, 0.45);
        kept.sort_unstable();
        // Reverse-rotate by a seed-dependent amount.
        let n = tubes.len().max(1);
        let perm: Vec<usize> = (0..tubes.len()).map(|i| (i + seed as usize % n) % n).rev().collect();
        let t2: Vec<_> = perm.iter().map(|&i| tubes[i]).collect();
        let s2: Vec<_> = perm.iter().map(|&i| scores[i]).collect();
        let mut again: Vec<usize> = nms(&t2, &s2, 0.45).into_iter().map(|i| perm[i]).collect();
        again.sort_unstable();
        prop_assert_eq!(kept, again);
    }

    #[test]
    fn matching_is_invariant_to_gt_order(
        priors in prop::collection::vec(bbox(), 3..12),
        gts in prop::collection::vec((bbox(), 0usize..4), 1..4),
    ) {
        // Gt j starts on prior j, so overlaps are distinct and no index
        // tie-break is involved.
        let gts: Vec<GroundTruthMicroTube> = gts
            .into_iter()
            .enumerate()
            .map(|(j, (b, class_id))| GroundTruthMicroTube { boxes: vec![priors[j], b], class_id })
            .collect();
        let set = PriorBoxSet::new(priors, Variances::default()).unwrap();
        let reversed: Vec<GroundTruthMicroTube> = gts.iter().rev().cloned().collect();
        let a = match_priors(&set, &gts, 0.5).unwrap();
        let b = match_priors(&set, &reversed, 0.5).unwrap();
        let g = gts.len();
        for (x, y) in a.per_prior().iter().zip(b.per_prior()) {
            prop_assert_eq!(x.map(|m| (m.gt, m.forced)), y.map(|m| (g - 1 - m.gt, m.forced)));
        }
        prop_assert!(a.n_matched() >= g);
    }

    #[test]
    fn total_loss_invariant_to_prior_order(
        priors in prop::collection::vec(bbox(), 4..12),
        anchor in 0usize..4,
        second in bbox(),
        logits in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 12),
        outputs in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 16), 12),
        shift in 1usize..11,
    ) {
        let horizon = PredictionHorizon::new(2, 5, 1).unwrap();
        let p = priors.len();
        // Anchor the gt on one prior so the forced match does not hinge on
        // index tie-breaks, which legitimately depend on prior order.
        let gt = (priors[anchor], second);
        let loss = |order: &[usize]| {
            let set = PriorBoxSet::new(order.iter().map(|&i| priors[i]).collect(), Variances::default()).unwrap();
            let gts = [GroundTruthMicroTube { boxes: vec![gt.0, gt.1], class_id: 2 }];
            let m = match_priors(&set, &gts, 0.5).unwrap();
            let tubes = [TrainingTube { micro_tube: [gt.0, gt.1], past_future: vec![Some(gt.0), Some(gt.1)] }];
            let targets: Vec<Option<PriorTarget>> = encode_targets(&set, &m, &tubes).unwrap();
            let inputs = LossInputs {
                num_classes: 3,
                horizon,
                logits: order.iter().map(|&i| logits[i].clone()).collect(),
                micro_tube: order.iter().map(|&i| std::array::from_fn(|k| outputs[i][k])).collect(),
                prediction: order.iter().map(|&i| outputs[i][8..].to_vec()).collect(),
                assignment: &m,
                targets,
                alpha: 1.0,
                beta: 1.0,
                negative_ratio: 3.0,
            };
            total_loss(&inputs).unwrap().total
        };
        let identity: Vec<usize> = (0..p).collect();
        let rotated: Vec<usize> = (0..p).map(|i| (i + shift) % p).collect();
        let (a, b) = (loss(&identity), loss(&rotated));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }
}
