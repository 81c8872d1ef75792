//! Train a detector for a few hundred iterations on a small dataset and
//! evaluate it, optionally with the mask head. Usage: `train_tiny [--mask]`.

use shotmask::ablation::train_and_evaluate;
use shotmask::config::RunConfig;
use shotmask::data::generate_dataset;

fn main() -> shotmask::Result<()> {
    let mut config = RunConfig::default();
    config.data.train_images = 200;
    config.data.val_images = 50;
    config.train.iterations = 300;
    config.train.mask_head_enabled = std::env::args().any(|a| a == "--mask");
    let (train, val) = generate_dataset(&config.data)?;
    let start = std::time::Instant::now();
    let (trainer, loss, eval) = train_and_evaluate(&config, &train, &val)?;
    println!("{} iterations in {:.1}s, final loss {loss:.4}", trainer.iteration, start.elapsed().as_secs_f64());
    let b = &eval.bbox;
    println!("box  AP {:.3}  AP50 {:.3}  AP75 {:.3}  S/M/L {:.3}/{:.3}/{:.3}", b.ap, b.ap50, b.ap75, b.ap_small, b.ap_medium, b.ap_large);
    if let Some(s) = &eval.segm {
        println!("mask AP {:.3}  AP50 {:.3}", s.ap, s.ap50);
    }
    Ok(())
}
