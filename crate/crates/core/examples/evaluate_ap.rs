//! Score hand-made detections with the COCO-style evaluator.

use shotmask::eval::{evaluate, EvalParams, GroundTruth, Prediction};
use shotmask::geometry::{BBox, Detection};

fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> Detection {
    Detection {
        bbox: BBox::new(x1, y1, x2, y2),
        score,
        class_id,
        level: 3,
    }
}

fn main() -> shotmask::Result<()> {
    let gt = GroundTruth {
        boxes: vec![BBox::new(10.0, 10.0, 50.0, 50.0), BBox::new(60.0, 60.0, 100.0, 80.0)],
        classes: vec![0, 1],
        masks: None,
    };
    let pred = Prediction {
        detections: vec![
            det(10.0, 10.0, 50.0, 50.0, 0.9, 0),  // exact
            det(64.0, 60.0, 104.0, 80.0, 0.8, 1), // IoU 0.82
            det(12.0, 12.0, 52.0, 52.0, 0.3, 0),  // duplicate
        ],
        masks: None,
    };
    let r = evaluate(&[pred], &[gt], 2, &EvalParams::for_image_size(128, 128))?;
    let b = r.bbox;
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", b.ap, b.ap50, b.ap75);
    println!("per class AP {:?}", b.per_class_ap);
    Ok(())
}
