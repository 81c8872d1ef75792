//! Command-line front end: `generate`, `train`, `eval` and `ablate`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shotmask::ablation::{run_ablation, AblationOptions, GridSpec};
use shotmask::config::RunConfig;
use shotmask::data::Dataset;
use shotmask::run::{eval_checkpoint, generate_to, train_to, TRAIN_SPLIT_FILE, VAL_SPLIT_FILE};
use shotmask::{Error, Result};

#[derive(Parser)]
#[command(name = "shotmask", version, about = "Train and evaluate desk-scale single-shot detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits described by a config.
    Generate {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Overrides the dataset seed.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one configuration; writes metrics, beta trace, checkpoint and summary.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding train.smds/val.smds; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip the final evaluation on the val split.
        #[arg(long)]
        no_eval: bool,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .smds split file.
        #[arg(long)]
        split: PathBuf,
        /// Also score masks when the checkpoint has a mask head.
        #[arg(long)]
        masks: bool,
        /// Write the result as JSON here as well as to stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write report.json, table.csv and per_class.csv.
    Ablate {
        grid: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Also draw per-class AP50 deltas as SVG.
        #[arg(long)]
        svg: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

fn load_splits(config: &RunConfig, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let (train, val) = match data {
        Some(dir) => (Dataset::load(&dir.join(TRAIN_SPLIT_FILE))?, Dataset::load(&dir.join(VAL_SPLIT_FILE))?),
        None => shotmask::data::generate_dataset(&config.data)?,
    };
    if (train.width, train.height) != (config.data.width, config.data.height) {
        return Err(Error::Config(format!(
            "dataset is {}x{}, config expects {}x{}",
            train.width, train.height, config.data.width, config.data.height
        )));
    }
    Ok((train, val))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, data_seed, out } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = data_seed {
                config.data.seed = s;
            }
            let (t, v) = generate_to(&config, &out)?;
            println!("wrote {} and {}", t.display(), v.display());
        }
        Command::Train {
            config,
            seed,
            data,
            no_eval,
            out,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let (train, val) = load_splits(&config, data.as_deref())?;
            let start = std::time::Instant::now();
            let summary = train_to(&config, &train, (!no_eval).then_some(&val), &out)?;
            eprintln!("trained {} iterations in {:.1}s", summary.iterations, start.elapsed().as_secs_f64());
            if let Some(e) = &summary.eval {
                println!("box AP {:.4} AP50 {:.4} AP75 {:.4}", e.bbox.ap, e.bbox.ap50, e.bbox.ap75);
                if let Some(s) = &e.segm {
                    println!("mask AP {:.4} AP50 {:.4}", s.ap, s.ap50);
                }
            }
        }
        Command::Eval {
            checkpoint,
            split,
            masks,
            out,
        } => {
            let data = Dataset::load(&split)?;
            let result = eval_checkpoint(&checkpoint, &data, masks)?;
            let json = serde_json::to_string_pretty(&result)?;
            if let Some(path) = out {
                std::fs::write(path, &json)?;
            }
            println!("{json}");
        }
        Command::Ablate { grid, out, threads, svg } => {
            let grid = GridSpec::load(&grid)?;
            let progress = |r: &shotmask::ablation::RunResult, secs: f64| match (&r.bbox, &r.error) {
                (Some(b), _) => eprintln!("{} seed {}: AP {:.4} ({secs:.0}s)", r.cell, r.seed, b.ap),
                (_, Some(e)) => eprintln!("{} seed {}: FAILED {e}", r.cell, r.seed),
                _ => {}
            };
            let report = run_ablation(
                &grid,
                &AblationOptions {
                    threads,
                    on_run: Some(&progress),
                },
            )?;
            report.write_all(&out, svg)?;
            print!("{}", report.render());
            let failed: usize = report.cells.iter().map(|c| c.failed).sum();
            if failed > 0 {
                return Err(Error::Invariant(format!("{failed} ablation runs failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
