//! Tile anchors over a 128×128 image and show how best-match assignment
//! rescues a thin object that no anchor overlaps at IoU 0.5.

use shotmask::anchors::{generate_anchors, match_anchors, AnchorConfig, MatchParams};
use shotmask::geometry::{iou, BBox};

fn main() -> shotmask::Result<()> {
    let anchors = generate_anchors(&AnchorConfig::default(), 128, 128)?;
    println!("{} anchors, {} per location", anchors.len(), anchors.anchors_per_location);
    for grid in &anchors.grids {
        println!("  {grid:?}");
    }
    let objects = [BBox::new(20.0, 30.0, 52.0, 58.0), BBox::new(70.0, 40.0, 74.0, 96.0)];
    for (name, params) in [
        ("regular matching", MatchParams::standard()),
        ("best match at 0.0", MatchParams::with_best_match(0.0)),
    ] {
        let m = match_anchors(&anchors, &objects, &params)?;
        println!("{name}: {} positives", m.num_positives());
        for (j, gt) in objects.iter().enumerate() {
            let best = anchors.boxes.iter().map(|a| iou(a, gt)).fold(0.0, f64::max);
            let n = m.positives().filter(|&(_, g)| g == j).count();
            println!("  object {j} ({:.0}x{:.0}): best IoU {best:.3}, {n} positive anchors", gt.width(), gt.height());
        }
    }
    Ok(())
}
