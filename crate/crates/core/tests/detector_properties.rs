use dtmars_core::bbox::BBox;
use dtmars_core::detector::{decode, detection_loss, detection_loss_grad, nms, DecodeParams, DenseOutput, GRID};
use proptest::prelude::*;

fn dense() -> impl Strategy<Value = DenseOutput<f64>> {
    proptest::collection::vec(0.0..1.0f64, 5 * GRID * GRID).prop_map(|values| DenseOutput { grid: GRID, values })
}

fn gt_boxes() -> impl Strategy<Value = Vec<BBox>> {
    proptest::collection::vec(
        (0.05..0.95f64, 0.05..0.95f64, 0.02..0.4f64, 0.02..0.4f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap()),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_is_idempotent_on_decoded_sets(d in dense(), conf in 0.0..0.9f64, nms_iou in 0.1..0.9f64) {
        let params = DecodeParams { conf_thresh: conf, nms_iou, max_detections: 50 };
        let set = decode(&d, &params);
        prop_assert!(set.detections.len() <= 50);
        prop_assert!(set.detections.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        let again = nms(set.detections.clone(), nms_iou, 50);
        prop_assert_eq!(again, set.detections);
    }

    #[test]
    fn loss_is_nonnegative(d in dense(), gts in gt_boxes()) {
        let (l, g) = detection_loss_grad(&d, &gts);
        prop_assert!(l >= 0.0 && l.is_finite());
        prop_assert!(g.values.iter().all(|v| v.is_finite()));
        prop_assert_eq!(l, detection_loss(&d, &gts));
    }
}
