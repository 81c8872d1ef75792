//! Library results against brute-force and independently written references.

mod common;

use common::*;

#[test]
fn nms_matches_brute_force() {
    let c = nms_oracle_check(100);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn matching_matches_brute_force() {
    let c = matching_oracle_check(100);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn ap_matches_reference() {
    let c = ap_oracle_check(100);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn roi_align_matches_dense_resampling() {
    let c = roi_oracle_check(100);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn reference_ap_walkthrough() {
    use shotmask::eval::{GroundTruth, Prediction};
    use shotmask::geometry::{BBox, Detection};
    // one object, detections at IoU 1.0 (score .9) and a miss (score .8)
    let gt = GroundTruth {
        boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
        classes: vec![0],
        masks: None,
    };
    let det = |b: BBox, score: f64| Detection {
        bbox: b,
        score,
        class_id: 0,
        level: 3,
    };
    let p = Prediction {
        detections: vec![det(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9), det(BBox::new(50.0, 50.0, 60.0, 60.0), 0.8)],
        masks: None,
    };
    assert_eq!(reference_ap(std::slice::from_ref(&p), std::slice::from_ref(&gt), 0, 0.5, 100), Some(1.0));
    // miss ranked first: precision 0.5 at full recall
    let p2 = Prediction {
        detections: vec![det(BBox::new(50.0, 50.0, 60.0, 60.0), 0.95), p.detections[0]],
        masks: None,
    };
    assert_eq!(reference_ap(&[p2], std::slice::from_ref(&gt), 0, 0.5, 100), Some(0.5));
    assert_eq!(reference_ap(&[p], &[gt], 1, 0.5, 100), None);
}

#[test]
fn dense_oracle_reproduces_a_ramp() {
    use shotmask::geometry::BBox;
    use shotmask::Tensor;
    let f = Tensor::from_fn([1, 6, 6], |i| (i % 6) as f64 + 2.0 * (i / 6) as f64);
    let out = roi_align_dense_oracle(&f, &BBox::new(1.0, 1.0, 4.5, 4.5), 1.0, 14, 2);
    // first bin's samples at 1 + 0.25 * {0.25, 0.75}: mean x = 1.125
    assert!((out.data()[0] - (1.125 + 2.0 * 1.125)).abs() < 1e-12);
}
