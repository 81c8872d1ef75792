//! Train briefly with the mask head, then run inference on one validation
//! scene and draw the pasted mask of the top detection as ASCII.

use shotmask::ablation::train_and_evaluate;
use shotmask::config::RunConfig;
use shotmask::data::{generate_dataset, CLASS_NAMES};
use shotmask::infer::infer;

fn main() -> shotmask::Result<()> {
    let mut config = RunConfig::default();
    config.data.train_images = 200;
    config.data.val_images = 4;
    config.train.iterations = 400;
    config.train.mask_head_enabled = true;
    let (train, val) = generate_dataset(&config.data)?;
    let (trainer, _, _) = train_and_evaluate(&config, &train, &val)?;
    let scene = &val.scenes[0];
    let out = infer(&trainer.detector, &scene.image, scene.width, scene.height, &config.inference, true)?;
    println!("ground truth:");
    for o in &scene.objects {
        println!("  {:<9} {:?}", CLASS_NAMES[o.class_id], o.bbox);
    }
    println!("detections (ops: detection {}, total {}):", out.detection_ops, out.total_ops);
    for d in out.detections.iter().take(5) {
        println!("  {:<9} {:.3} {:?}", CLASS_NAMES[d.class_id], d.score, d.bbox);
    }
    if let Some(m) = out.masks.first() {
        let pasted = m.paste(scene.width, scene.height, config.inference.mask_threshold as f32);
        let b = m.bbox;
        for y in (b.y1.floor() as usize..(b.y2.ceil() as usize).min(scene.height)).step_by(2) {
            let row: String = (b.x1.floor() as usize..(b.x2.ceil() as usize).min(scene.width))
                .map(|x| if pasted[y * scene.width + x] > 0 { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
