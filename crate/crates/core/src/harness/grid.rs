//! Ablation grids: one training run per (value, seed) cell, summarized as
//! mean ± std per value.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{prepare_output_dir, train_seed, write_csv, RunReport, Trainer};
use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TargetKl,
    Gamma,
    TopP,
    /// NLPO mask sync period.
    Mu,
    /// Fraction of labels behind the sentiment reward classifier.
    DataFraction,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::TargetKl,
        AblationAxis::Gamma,
        AblationAxis::TopP,
        AblationAxis::Mu,
        AblationAxis::DataFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::TargetKl => "target_kl",
            AblationAxis::Gamma => "gamma",
            AblationAxis::TopP => "top_p",
            AblationAxis::Mu => "mu",
            AblationAxis::DataFraction => "data_fraction",
        }
    }

    /// Dotted config key the axis overrides.
    pub fn config_key(self) -> &'static str {
        match self {
            AblationAxis::TargetKl => "kl.target",
            AblationAxis::Gamma => "algo.gamma",
            AblationAxis::TopP => "algo.top_p",
            AblationAxis::Mu => "algo.mask_sync_period",
            AblationAxis::DataFraction => "reward.classifier_fraction",
        }
    }

    pub fn check(self, cfg: &TrainConfig) -> Result<()> {
        let ok = match self {
            AblationAxis::TargetKl | AblationAxis::Gamma => cfg.algorithm.uses_rl(),
            AblationAxis::TopP | AblationAxis::Mu => cfg.algorithm.uses_mask(),
            AblationAxis::DataFraction => cfg.task == TaskKind::SentimentContinuation,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "axis {} does not apply to {} on {}",
                self.name(),
                cfg.algorithm,
                cfg.task.name()
            )))
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation axis `{s}`")))
    }
}

/// Outcome of one (value, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub value: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunReport, String>,
}

/// Metrics summarized per grid value, in column order.
pub const GRID_METRICS: &[&str] = &[
    "task_metric",
    "perplexity",
    "distinct-1",
    "distinct-2",
    "unique-1",
    "unique-2",
    "h1",
    "h2",
    "msttr",
    "length",
];

/// Per-value summary over the successful seeds (population std).
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub value: String,
    pub succeeded: usize,
    pub failed: usize,
    /// `(metric, mean, std)`; `None` when no seed produced the metric.
    pub metrics: Vec<(String, Option<(f64, f64)>)>,
}

impl GridRow {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(m, _)| m == metric)
            .and_then(|(_, v)| v.map(|(mean, _)| mean))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub axis: AblationAxis,
    pub cells: Vec<GridCell>,
    pub rows: Vec<GridRow>,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl GridResult {
    fn summarize(axis: AblationAxis, values: &[String], cells: Vec<GridCell>) -> Self {
        let rows = values
            .iter()
            .map(|v| {
                let mine: Vec<&GridCell> = cells.iter().filter(|c| &c.value == v).collect();
                let ok: Vec<&RunReport> = mine.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
                let metrics = GRID_METRICS
                    .iter()
                    .map(|&m| {
                        let xs: Vec<f64> = ok.iter().filter_map(|r| r.val.get(m)).collect();
                        (m.to_owned(), mean_std(&xs))
                    })
                    .collect();
                GridRow {
                    value: v.clone(),
                    succeeded: ok.len(),
                    failed: mine.len() - ok.len(),
                    metrics,
                }
            })
            .collect();
        GridResult { axis, cells, rows }
    }

    /// Writes `summary.csv` (one row per value; `<metric>_mean` and
    /// `<metric>_std` columns) and `cells.csv` (one row per run).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec![self.axis.name().to_owned(), "seeds_ok".into(), "seeds_failed".into()];
        for m in GRID_METRICS {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.value.clone(), r.succeeded.to_string(), r.failed.to_string()];
            for (_, v) in &r.metrics {
                match v {
                    Some((m, s)) => {
                        rec.push(m.to_string());
                        rec.push(s.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        #[derive(Serialize)]
        struct CellRow<'a> {
            value: &'a str,
            seed: u64,
            status: &'a str,
            task_metric: Option<f64>,
            perplexity: Option<f64>,
            error: &'a str,
        }
        let cells: Vec<CellRow> = self
            .cells
            .iter()
            .map(|c| match &c.outcome {
                Ok(r) => CellRow {
                    value: &c.value,
                    seed: c.seed,
                    status: "ok",
                    task_metric: r.val.get("task_metric"),
                    perplexity: r.val.get("perplexity"),
                    error: "",
                },
                Err(e) => CellRow {
                    value: &c.value,
                    seed: c.seed,
                    status: "failed",
                    task_metric: None,
                    perplexity: None,
                    error: e,
                },
            })
            .collect();
        write_csv(&dir.join("cells.csv"), &cells)
    }
}

/// Runs `values × cfg.seeds` training jobs on a pool of `jobs` threads.
/// With `out` set, each cell writes its run under `out/<axis>=<value>/` and
/// the summary goes to `out`. A failing cell is recorded and the grid
/// continues.
pub fn run_ablation_grid(
    cfg: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
    jobs: usize,
    out: Option<&Path>,
    overwrite: bool,
) -> Result<GridResult> {
    axis.check(cfg)?;
    if values.is_empty() {
        return Err(Error::Usage("an ablation needs at least one value".into()));
    }
    // resolve every cell's config up front so bad values fail fast
    let mut cells = Vec::new();
    for v in values {
        let mut c = cfg.with_overrides(&[format!("{}={v}", axis.config_key())])?;
        c.validate()?;
        if let Some(dir) = out {
            c.output_dir = cell_dir(dir, axis, v);
        }
        for &seed in &cfg.seeds {
            cells.push((v.clone(), seed, c.clone()));
        }
    }
    if let Some(dir) = out {
        prepare_output_dir(dir, overwrite)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let done: Vec<GridCell> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|(value, seed, c)| {
                let outcome = if out.is_some() {
                    train_seed(&c, seed, true)
                } else {
                    Trainer::new(&c, seed).and_then(Trainer::finish)
                };
                GridCell {
                    value,
                    seed,
                    outcome: outcome.map_err(|e| e.to_string()),
                }
            })
            .collect()
    });
    let result = GridResult::summarize(axis, values, done);
    if let Some(dir) = out {
        result.write(dir)?;
    }
    Ok(result)
}

fn cell_dir(out: &Path, axis: AblationAxis, value: &str) -> PathBuf {
    let safe: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    out.join(format!("{}={safe}", axis.name()))
}
