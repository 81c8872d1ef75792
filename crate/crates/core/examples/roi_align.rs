//! Route boxes to pyramid levels by area and pool a 14×14 patch from a
//! synthetic feature map with ROI-Align.

use shotmask::geometry::BBox;
use shotmask::mask::{roi_align, LevelAssignment, RoiAlignParams};
use shotmask::Tensor;

fn main() -> shotmask::Result<()> {
    let rule = LevelAssignment::default();
    for side in [100.0, 223.0, 224.0, 447.0, 448.0, 900.0] {
        let b = BBox::new(0.0, 0.0, side, side);
        println!("{side:>5}px box -> P{}", rule.assign(&b)?);
    }
    // a ramp f(x, y) = x + 10 y: bilinear sampling reproduces it exactly
    let (h, w) = (16, 16);
    let feature = Tensor::from_fn([1, h, w], |i| ((i % w) + 10 * (i / w)) as f64);
    let roi = BBox::new(8.0, 8.0, 72.0, 40.0);
    let stride = 8.0;
    let pooled = roi_align(&feature, &roi, stride, RoiAlignParams::default())?;
    let out = pooled.data();
    println!("pooled shape {:?}", pooled.shape());
    println!("corner values {:.3} {:.3} {:.3}", out[0], out[13], out[14 * 14 - 1]);
    Ok(())
}
