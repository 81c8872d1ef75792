//! Run a miniature ablation grid and print its table. Pass a grid file to
//! run that instead, e.g. `ablation_grid configs/best_match_sweep.toml`.

use shotmask::ablation::{run_ablation, AblationOptions, GridSpec};

const MINI: &str = r#"
name = "mini best-match"
seeds = [0, 1]

[base.data]
train_images = 64
val_images = 16
[base.train]
iterations = 60
batch_size = 4

[[cells]]
name = "disabled"
set = { "train.best_match_enabled" = false }

[[cells]]
name = "threshold 0.0"
set = { "train.best_match_thresh" = 0.0 }
"#;

fn main() -> shotmask::Result<()> {
    let grid = match std::env::args().nth(1) {
        Some(path) => GridSpec::load(path.as_ref())?,
        None => GridSpec::from_toml(MINI)?,
    };
    let progress = |r: &shotmask::ablation::RunResult, secs: f64| eprintln!("  {} / seed {} done in {secs:.1}s", r.cell, r.seed);
    let report = run_ablation(&grid, &AblationOptions { threads: None, on_run: Some(&progress) })?;
    print!("{}", report.render());
    for c in &report.cells {
        println!("{}: per-class AP50 change {:?}", c.cell, c.class_ap50_delta);
    }
    Ok(())
}
