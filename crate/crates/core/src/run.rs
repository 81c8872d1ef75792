//! File-producing drivers behind the command-line verbs. Each writes only
//! deterministic content, so two runs with the same configuration produce
//! byte-identical outputs; wall-clock timings go to the caller.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, Dataset};
use crate::error::Result;
use crate::eval::{evaluate_detector, EvalResult};
use crate::losses::LossReport;
use crate::train::Trainer;

pub const TRAIN_SPLIT_FILE: &str = "train.smds";
pub const VAL_SPLIT_FILE: &str = "val.smds";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BETA_FILE: &str = "beta.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Generates both splits and writes them into `dir`.
pub fn generate_to(config: &RunConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let (train, val) = generate_dataset(&config.data)?;
    let paths = (dir.join(TRAIN_SPLIT_FILE), dir.join(VAL_SPLIT_FILE));
    train.save(&paths.0)?;
    val.save(&paths.1)?;
    Ok(paths)
}

/// Final record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: Option<LossReport>,
    /// Mean total loss over the last tenth of training.
    pub tail_loss: f64,
    pub eval: Option<EvalResult>,
}

/// Trains `config` on `train`, streaming per-iteration metrics into
/// `out_dir`, then saves the checkpoint and, when `val` is given, the
/// evaluation. Metrics written before a failure stay on disk.
pub fn train_to(config: &RunConfig, train: &Dataset, val: Option<&Dataset>, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml()?)?;
    let mut trainer = Trainer::from_config(config)?;
    let mut metrics = BufWriter::new(std::fs::File::create(out_dir.join(METRICS_FILE))?);
    let mut beta = BufWriter::new(std::fs::File::create(out_dir.join(BETA_FILE))?);
    writeln!(beta, "iteration,beta_x,beta_y,beta_w,beta_h,mu_x,mu_y,mu_w,mu_h")?;
    let mut last = None;
    let tail_from = config.train.iterations - config.train.iterations.div_ceil(10);
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    let fitted = trainer.fit(train, |rec| {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.write_all(b"\n")?;
        let (b, m) = (rec.report.beta_per_channel, rec.report.running_mean_per_channel);
        writeln!(
            beta,
            "{},{},{},{},{},{},{},{},{}",
            rec.iteration, b[0], b[1], b[2], b[3], m[0], m[1], m[2], m[3]
        )?;
        if rec.iteration >= tail_from {
            tail_sum += rec.report.total;
            tail_n += 1;
        }
        last = Some(rec.report.clone());
        Ok(())
    });
    metrics.flush()?;
    beta.flush()?;
    fitted?;
    trainer.checkpoint(config).save(&out_dir.join(CHECKPOINT_FILE))?;
    let eval = match val {
        Some(v) => Some(evaluate_detector(&trainer.detector, v, &config.inference, config.train.mask_head_enabled)?),
        None => None,
    };
    let summary = TrainSummary {
        seed: config.seed,
        iterations: trainer.iteration,
        final_loss: last,
        tail_loss: if tail_n > 0 { tail_sum / tail_n as f64 } else { f64::NAN },
        eval,
    };
    std::fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Scores a saved checkpoint on a dataset split. Masks are evaluated when
/// the checkpoint carries a mask head and `masks` is set.
pub fn eval_checkpoint(checkpoint: &Path, data: &Dataset, masks: bool) -> Result<EvalResult> {
    let ck = Checkpoint::load(checkpoint)?;
    let with_masks = masks && ck.config.train.mask_head_enabled;
    evaluate_detector(&ck.detector, data, &ck.config.inference, with_masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    #[test]
    fn train_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig {
            data: DatasetConfig {
                train_images: 4,
                val_images: 2,
                width: 64,
                height: 64,
                ..DatasetConfig::default()
            },
            ..RunConfig::default()
        };
        config.train.iterations = 3;
        config.train.batch_size = 2;
        let (train, val) = generate_to(&config, dir.path()).unwrap();
        let train = Dataset::load(&train).unwrap();
        let val = Dataset::load(&val).unwrap();
        let s = train_to(&config, &train, Some(&val), dir.path()).unwrap();
        assert_eq!(s.iterations, 3);
        let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 3);
        assert_eq!(std::fs::read_to_string(dir.path().join(BETA_FILE)).unwrap().lines().count(), 4);
        let e = eval_checkpoint(&dir.path().join(CHECKPOINT_FILE), &val, true).unwrap();
        assert_eq!(Some(e), s.eval);
    }
}
