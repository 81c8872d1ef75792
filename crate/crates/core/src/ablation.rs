//! Ablation grids: train one detector per cell and seed, evaluate it and
//! aggregate the results into tables.
//!
//! A grid file is TOML:
//!
//! ```toml
//! name = "best-match"
//! seeds = [0, 1, 2]
//!
//! [base.train]            # applied to every cell
//! iterations = 2000
//!
//! [[cells]]
//! name = "disabled"
//! set = { "train.best_match_enabled" = false }
//!
//! [[axes]]                # optional cartesian product, appended to cells
//! key = "train.best_match_thresh"
//! values = [0.5, 0.4, 0.3, 0.2, 0.0]
//! ```
//!
//! Keys in `set` and `axes` are dotted paths into the run configuration.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_dataset, Dataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detector, ApSummary, NO_OBJECTS};
use crate::train::Trainer;

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: toml::Table,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub axes: Vec<Axis>,
    /// Cell that per-class deltas are measured against; defaults to the first.
    #[serde(default)]
    pub baseline: Option<String>,
}

/// A fully resolved grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

/// Writes `value` at a dotted `path` inside `table`, creating tables on
/// the way.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {path:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Deep-merges `overrides` into `base`; nested tables merge, everything
/// else replaces. Keys containing dots address nested tables.
fn merge(base: &mut toml::Table, overrides: &toml::Table) -> Result<()> {
    for (k, v) in overrides {
        match (v, base.get_mut(k)) {
            (toml::Value::Table(sub), Some(toml::Value::Table(dst))) if !k.contains('.') => merge(dst, sub)?,
            (toml::Value::Table(sub), None) if !k.contains('.') => {
                let mut dst = toml::Table::new();
                merge(&mut dst, sub)?;
                base.insert(k.clone(), toml::Value::Table(dst));
            }
            _ => set_path(base, k, v.clone())?,
        }
    }
    Ok(())
}

fn label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: GridSpec = toml::from_str(text)?;
        g.expand()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Resolves every cell into a validated run configuration.
    pub fn expand(&self) -> Result<Vec<Cell>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        let mut specs: Vec<(String, toml::Table)> = self.cells.iter().map(|c| (c.name.clone(), c.set.clone())).collect();
        if !self.axes.is_empty() {
            let mut combos: Vec<(Vec<String>, toml::Table)> = vec![(Vec::new(), toml::Table::new())];
            for axis in &self.axes {
                if axis.values.is_empty() {
                    return Err(Error::Config(format!("axis {} has no values", axis.key)));
                }
                let mut next = Vec::new();
                for (names, t) in &combos {
                    for v in &axis.values {
                        let mut t = t.clone();
                        set_path(&mut t, &axis.key, v.clone())?;
                        let mut names = names.clone();
                        names.push(format!("{}={}", axis.key, label(v)));
                        next.push((names, t));
                    }
                }
                combos = next;
            }
            specs.extend(combos.into_iter().map(|(n, t)| (n.join(", "), t)));
        }
        if specs.is_empty() {
            specs.push(("base".into(), toml::Table::new()));
        }
        let mut seen = std::collections::HashSet::new();
        specs
            .into_iter()
            .map(|(name, set)| {
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("duplicate cell name {name:?}")));
                }
                let mut table = self.base.clone();
                merge(&mut table, &set)?;
                let config: RunConfig = toml::Value::Table(table).try_into()?;
                config.validate()?;
                Ok(Cell { name, config })
            })
            .collect()
    }
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: String,
    pub seed: u64,
    pub bbox: Option<ApSummary>,
    pub segm: Option<ApSummary>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub spread: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let spread = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Stat { mean, spread, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub succeeded: usize,
    pub failed: usize,
    pub metrics: BTreeMap<String, Stat>,
    /// Per-class AP50 mean minus the baseline cell's.
    pub class_ap50_delta: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunResult>,
}

/// Headline metrics in table order.
pub const METRICS: [&str; 8] = ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "mask_AP", "mask_AP50"];

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn metric_values(r: &RunResult) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if let Some(b) = &r.bbox {
        out.extend([
            ("AP".to_string(), b.ap),
            ("AP50".into(), b.ap50),
            ("AP75".into(), b.ap75),
            ("AP_S".into(), b.ap_small),
            ("AP_M".into(), b.ap_medium),
            ("AP_L".into(), b.ap_large),
        ]);
        // empty area ranges carry no information
        out.retain(|(_, v)| *v != NO_OBJECTS);
        for (c, v) in b.per_class_ap.iter().enumerate() {
            if let Some(v) = v {
                out.push((format!("AP_{}", class_name(c)), *v));
            }
        }
        for (c, v) in b.per_class_ap50.iter().enumerate() {
            if let Some(v) = v {
                out.push((format!("AP50_{}", class_name(c)), *v));
            }
        }
    }
    if let Some(s) = &r.segm {
        out.push(("mask_AP".into(), s.ap));
        out.push(("mask_AP50".into(), s.ap50));
    }
    out
}

/// Trains `config` on `train` and scores it on `val`.
pub fn train_and_evaluate(config: &RunConfig, train: &Dataset, val: &Dataset) -> Result<(Trainer, f64, crate::eval::EvalResult)> {
    let mut trainer = Trainer::from_config(config)?;
    let mut last = f64::NAN;
    trainer.fit(train, |r| {
        last = r.report.total;
        Ok(())
    })?;
    let eval = evaluate_detector(&trainer.detector, val, &config.inference, config.train.mask_head_enabled)?;
    Ok((trainer, last, eval))
}

/// Progress callback: a finished run and its wall time in seconds.
pub type RunCallback<'a> = &'a (dyn Fn(&RunResult, f64) + Sync);

#[derive(Default)]
pub struct AblationOptions<'a> {
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Called after every finished run with its wall time in seconds.
    pub on_run: Option<RunCallback<'a>>,
}

pub fn run_ablation(grid: &GridSpec, options: &AblationOptions) -> Result<AblationReport> {
    let cells = grid.expand()?;
    let baseline = grid.baseline.clone().unwrap_or_else(|| cells[0].name.clone());
    if !cells.iter().any(|c| c.name == baseline) {
        return Err(Error::Config(format!("baseline cell {baseline:?} is not in the grid")));
    }
    // one dataset per distinct data configuration, generated up front
    let mut datasets: HashMap<String, (Dataset, Dataset)> = HashMap::new();
    for c in &cells {
        let key = toml::to_string(&c.config.data)?;
        if let std::collections::hash_map::Entry::Vacant(e) = datasets.entry(key) {
            e.insert(generate_dataset(&c.config.data)?);
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run_job = |&(ci, seed): &(usize, u64)| -> RunResult {
        let cell = &cells[ci];
        let config = RunConfig {
            seed,
            ..cell.config.clone()
        };
        let start = Instant::now();
        let key = toml::to_string(&config.data).unwrap_or_default();
        let (train, val) = &datasets[&key];
        let outcome = catch_unwind(AssertUnwindSafe(|| train_and_evaluate(&config, train, val)));
        let result = match outcome {
            Ok(Ok((_, loss, eval))) => RunResult {
                cell: cell.name.clone(),
                seed,
                bbox: Some(eval.bbox),
                segm: eval.segm,
                final_loss: Some(loss),
                error: None,
            },
            Ok(Err(e)) => failed(cell, seed, e.to_string()),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                failed(cell, seed, format!("panicked: {msg}"))
            }
        };
        if let Some(cb) = options.on_run {
            cb(&result, start.elapsed().as_secs_f64());
        }
        result
    };
    let runs: Vec<RunResult> = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(run_job).collect()),
        None => jobs.par_iter().map(run_job).collect(),
    };
    Ok(summarize(grid, &cells, &baseline, runs))
}

fn failed(cell: &Cell, seed: u64, error: String) -> RunResult {
    RunResult {
        cell: cell.name.clone(),
        seed,
        bbox: None,
        segm: None,
        final_loss: None,
        error: Some(error),
    }
}

fn summarize(grid: &GridSpec, cells: &[Cell], baseline: &str, runs: Vec<RunResult>) -> AblationReport {
    let mut summaries: Vec<CellSummary> = cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.cell == c.name).collect();
            let mut collected: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in mine.iter().filter(|r| r.error.is_none()) {
                for (k, v) in metric_values(r) {
                    collected.entry(k).or_default().push(v);
                }
            }
            CellSummary {
                cell: c.name.clone(),
                succeeded: mine.iter().filter(|r| r.error.is_none()).count(),
                failed: mine.iter().filter(|r| r.error.is_some()).count(),
                metrics: collected.into_iter().map(|(k, v)| (k, Stat::of(v))).collect(),
                class_ap50_delta: BTreeMap::new(),
            }
        })
        .collect();
    let base_metrics = summaries
        .iter()
        .find(|s| s.cell == baseline)
        .map(|s| s.metrics.clone())
        .unwrap_or_default();
    for s in &mut summaries {
        for (k, stat) in &s.metrics {
            if let Some(class) = k.strip_prefix("AP50_") {
                if let Some(b) = base_metrics.get(k) {
                    s.class_ap50_delta.insert(class.to_string(), stat.mean - b.mean);
                }
            }
        }
    }
    AblationReport {
        name: grid.name.clone(),
        seeds: grid.seeds.clone(),
        baseline: baseline.to_string(),
        cells: summaries,
        runs,
    }
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell == name)
    }

    pub fn runs_of<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.cell == cell)
    }

    /// One row per cell with `mean` and `spread` columns per headline metric.
    pub fn write_table_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cell".to_string(), "runs".into(), "failed".into()];
        for m in METRICS {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_spread"));
        }
        out.write_record(&header).map_err(csv_err)?;
        for c in &self.cells {
            let mut row = vec![c.cell.clone(), c.succeeded.to_string(), c.failed.to_string()];
            for m in METRICS {
                match c.metrics.get(m) {
                    Some(s) => {
                        row.push(format!("{:.4}", s.mean));
                        row.push(format!("{:.4}", s.spread));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long-format per-class AP50 with the delta against the baseline cell.
    pub fn write_class_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell", "class", "ap50_mean", "ap50_spread", "delta_vs_baseline"])
            .map_err(csv_err)?;
        for c in &self.cells {
            for (k, s) in &c.metrics {
                let Some(class) = k.strip_prefix("AP50_") else { continue };
                let delta = c.class_ap50_delta.get(class).map_or(String::new(), |d| format!("{d:.4}"));
                out.write_record([
                    c.cell.clone(),
                    class.to_string(),
                    format!("{:.4}", s.mean),
                    format!("{:.4}", s.spread),
                    delta,
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Grouped bar chart of per-class AP50 deltas, one group per class.
    pub fn to_svg(&self) -> String {
        let classes: Vec<String> = {
            let mut v: Vec<String> = self
                .cells
                .iter()
                .flat_map(|c| c.class_ap50_delta.keys().cloned())
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let cells: Vec<&CellSummary> = self.cells.iter().filter(|c| c.cell != self.baseline).collect();
        let (w, h, pad) = (120.0 * classes.len().max(1) as f64 + 80.0, 260.0, 40.0);
        let max = cells
            .iter()
            .flat_map(|c| c.class_ap50_delta.values())
            .fold(0.05f64, |m, v| m.max(v.abs()));
        let mid = h / 2.0;
        let scale = (h / 2.0 - pad) / max;
        let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            h + 20.0 * cells.len() as f64
        );
        s += &format!(
            "<text x=\"10\" y=\"16\">{}: per-class AP50 change vs {}</text>\n",
            xml_escape(&self.name),
            xml_escape(&self.baseline)
        );
        s += &format!("<line x1=\"60\" y1=\"{mid}\" x2=\"{}\" y2=\"{mid}\" stroke=\"black\"/>\n", w - 10.0);
        let bar = 80.0 / cells.len().max(1) as f64;
        for (ci, class) in classes.iter().enumerate() {
            let x0 = 70.0 + 120.0 * ci as f64;
            s += &format!("<text x=\"{x0}\" y=\"{}\">{}</text>\n", h - 8.0, xml_escape(class));
            for (k, c) in cells.iter().enumerate() {
                let d = c.class_ap50_delta.get(class).copied().unwrap_or(0.0);
                let len = d.abs() * scale;
                let y = if d >= 0.0 { mid - len } else { mid };
                s += &format!(
                    "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{len:.1}\" fill=\"{}\"/>\n",
                    x0 + bar * k as f64,
                    bar * 0.9,
                    palette[k % palette.len()]
                );
            }
        }
        for (k, c) in cells.iter().enumerate() {
            let y = h + 14.0 + 20.0 * k as f64;
            s += &format!(
                "<rect x=\"10\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"26\" y=\"{y}\">{}</text>\n",
                y - 9.0,
                palette[k % palette.len()],
                xml_escape(&c.cell)
            );
        }
        s += "</svg>\n";
        s
    }

    /// Writes `report.json`, `table.csv`, `per_class.csv` and optionally
    /// `per_class_delta.svg` into `dir`.
    pub fn write_all(&self, dir: &Path, svg: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        self.write_table_csv(std::fs::File::create(dir.join("table.csv"))?)?;
        self.write_class_csv(std::fs::File::create(dir.join("per_class.csv"))?)?;
        if svg {
            std::fs::write(dir.join("per_class_delta.svg"), self.to_svg())?;
        }
        Ok(())
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = format!("{} (seeds {:?}, baseline {})\n", self.name, self.seeds, self.baseline);
        s += &format!("{:<40}", "cell");
        for m in METRICS {
            s += &format!("{m:>16}");
        }
        s.push('\n');
        for c in &self.cells {
            s += &format!("{:<40}", truncate(&c.cell, 39));
            for m in METRICS {
                match c.metrics.get(m) {
                    Some(st) => s += &format!("{:>16}", format!("{:.3}±{:.3}", st.mean, st.spread)),
                    None => s += &format!("{:>16}", "-"),
                }
            }
            if c.failed > 0 {
                s += &format!("  ({} failed)", c.failed);
            }
            s.push('\n');
        }
        s
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
