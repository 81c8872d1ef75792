//! Generate the synthetic shapes dataset, save both splits and print class
//! statistics. Usage: `generate_dataset [out_dir]`.

use shotmask::config::RunConfig;
use shotmask::data::{Dataset, CLASS_NAMES};
use shotmask::run::generate_to;

fn main() -> shotmask::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/shapes".into());
    let config = RunConfig::default();
    let start = std::time::Instant::now();
    let (train, val) = generate_to(&config, out.as_ref())?;
    println!("generated in {:.2}s", start.elapsed().as_secs_f64());
    for path in [train, val] {
        let data = Dataset::load(&path)?;
        let mut counts = [0usize; 4];
        let mut min_side = f64::INFINITY;
        for obj in data.scenes.iter().flat_map(|s| &s.objects) {
            counts[obj.class_id] += 1;
            min_side = min_side.min(obj.bbox.width().min(obj.bbox.height()));
        }
        println!("{}: {} images, {}x{}", path.display(), data.len(), data.width, data.height);
        for (name, n) in CLASS_NAMES.iter().zip(counts) {
            println!("  {name:<10} {n}");
        }
        println!("  thinnest object side {min_side:.0}px");
    }
    Ok(())
}
