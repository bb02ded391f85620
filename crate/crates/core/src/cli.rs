//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure; failures also print one JSON line on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{generate_task_dataset, strip_eos, Split, TaskKind};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::{
    generate_all, prepare_base, prepare_supervised, prepare_task, run_ablation_grid, score_generations,
    stream_seed, AblationAxis, Trainer,
};
use crate::metrics::{score_corpus, ScoredItem, METRIC_NAMES};
use crate::plot::{ablation_svg, find_curves, learning_curve_svg, read_curve};
use crate::vocab::EOS;

#[derive(Debug, Parser)]
#[command(name = "seqrl", version, about = "Reinforcement learning for token-level text generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task dataset
    GenData(GenDataArgs),
    /// Train one run per seed
    Train(TrainArgs),
    /// Evaluate a checkpoint or an untrained starting policy
    Eval(EvalArgs),
    /// Run an ablation grid over one hyperparameter
    Ablate(AblateArgs),
    /// Score candidate texts against references
    Score(ScoreArgs),
    /// Draw learning curves or an ablation summary as SVG
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file; omitted keys take their defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set algo.gamma=1.0 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        base.with_overrides(&self.set)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Task to generate (overrides the config's task)
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Dataset seed (overrides data.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replace existing output
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Train only this seed instead of the config's seed list
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides output_dir)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace existing run directories
    #[arg(long)]
    pub overwrite: bool,
    /// Worker threads
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Continue from a checkpoint file; the config stored in it is used
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "set", "seed", "out", "overwrite"])]
    pub resume: Option<PathBuf>,
    /// Print the resolved config and exit
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint to evaluate; without it the run's starting policy is used
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Run seed (default: the first configured seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: EvalSplit,
    /// Directory for report.json and generations.jsonl (default: report on stdout)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replace existing output
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Axis: target_kl, gamma, top_p, mu or data_fraction
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated values, e.g. 0.5,0.95,1.0
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Run only this seed instead of the config's seed list
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replace existing output
    #[arg(long)]
    pub overwrite: bool,
    /// Concurrent training runs
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL candidates: a string, a token array or {"generation": ...} per line
    #[arg(long, value_name = "FILE")]
    pub candidates: PathBuf,
    /// JSONL references: a string, a list of strings, or a dataset line per line
    #[arg(long, value_name = "FILE")]
    pub references: PathBuf,
    /// Comma-separated metric names (default: all)
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    /// Write the report to this file instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Replace existing output
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directories, grid directories or CSV files
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output SVG (default: curves.svg or ablation.svg in the first input directory)
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Replace existing output
    #[arg(long)]
    pub overwrite: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                report_error("usage", &e.kind().to_string(), code);
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report_error(kind(&e), &e.to_string(), code);
            code
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::WouldClobber(_) | Error::UnknownTask(_) => 1,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Usage(_) => "usage",
        Error::Config(_) => "config",
        Error::WouldClobber(_) => "would_clobber",
        Error::UnknownTask(_) => "unknown_task",
        Error::Io { .. } => "io",
        Error::NonFinite { .. } => "non_finite",
        Error::Checkpoint(_) => "checkpoint",
        _ => "runtime",
    }
}

fn report_error(kind: &str, message: &str, code: i32) {
    let line = json!({ "error": kind, "message": message.trim(), "exit_code": code });
    eprintln!("{line}");
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Score(a) => score(a),
        Command::Plot(a) => plot(a),
    }
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn echo_config(cfg: &TrainConfig) -> Result<()> {
    print_json(&json!({ "config": cfg }))
}

fn refuse_clobber(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::WouldClobber(path.to_path_buf()));
    }
    Ok(())
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Usage("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    echo_config(&cfg)?;
    crate::harness::prepare_output_dir(&a.out, a.overwrite)?;
    let ds = generate_task_dataset(cfg.task, cfg.data.seed, cfg.data.sizes)?;
    ds.write_dir(&a.out)?;
    print_json(&json!({
        "task": cfg.task,
        "dir": a.out,
        "vocab_size": ds.vocab.len(),
        "train": ds.train.len(),
        "val": ds.val.len(),
        "test": ds.test.len(),
        "generic": ds.generic.len(),
    }))
}

fn progress(t: &Trainer) {
    if let Some(r) = t.rows().last().filter(|r| r.val_task_metric.is_some()) {
        eprintln!(
            "{} update {:>4}  val task {:.4}  perplexity {:.3}",
            crate::harness::run_id(t.config(), t.seed()),
            r.update,
            r.val_task_metric.unwrap_or(f64::NAN),
            r.val_perplexity.unwrap_or(f64::NAN),
        );
    }
}

fn train(a: TrainArgs) -> Result<()> {
    if let Some(ckpt) = &a.resume {
        return with_jobs(a.jobs, || -> Result<()> {
            let mut t = Trainer::resume(ckpt)?;
            echo_config(t.config())?;
            while !t.is_finished() {
                t.step()?;
                progress(&t);
            }
            let report = t.finish()?;
            print_json(&json!({ "report": report }))
        })?;
    }
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    echo_config(&cfg)?;
    if a.dry_run {
        return Ok(());
    }
    // check every run directory before any training starts
    for &s in &cfg.seeds {
        let dir = cfg.output_dir.join(crate::harness::run_id(&cfg, s));
        if !a.overwrite && fs::read_dir(&dir).is_ok_and(|mut d| d.next().is_some()) {
            return Err(Error::WouldClobber(dir));
        }
    }
    let reports = with_jobs(a.jobs, || -> Result<Vec<_>> {
        use rayon::prelude::*;
        cfg.seeds
            .par_iter()
            .map(|&s| {
                let mut t = Trainer::create(&cfg, s, a.overwrite)?;
                progress(&t);
                while !t.is_finished() {
                    t.step()?;
                    progress(&t);
                }
                t.finish()
            })
            .collect()
    })??;
    for r in reports {
        print_json(&json!({
            "run_id": r.run_id,
            "seed": r.seed,
            "updates": r.updates,
            "val": r.val.metrics,
            "test": r.test.metrics,
        }))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, seed, policy) = match &a.checkpoint {
        Some(p) => {
            let t = Trainer::resume(p)?;
            (t.config().clone(), t.seed(), t.policy().clone())
        }
        None => {
            let cfg = a.cfg.resolve()?;
            cfg.validate()?;
            let seed = a.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
            let policy = if cfg.algorithm.uses_supervised() {
                prepare_supervised(&cfg, seed)?
            } else {
                prepare_base(&cfg, seed)?
            };
            (cfg, seed, (*policy).clone())
        }
    };
    let judge = if cfg.algorithm.uses_supervised() {
        prepare_supervised(&cfg, seed)?
    } else {
        prepare_base(&cfg, seed)?
    };
    let ctx = prepare_task(&cfg, seed)?;
    let split = match a.split {
        EvalSplit::Val => Split::Val,
        EvalSplit::Test => Split::Test,
    };
    let examples = ctx.dataset.split(split);
    let gens = generate_all(&policy, examples, &cfg.decode, stream_seed(seed, "eval", 0))?;
    let report = score_generations(examples, &gens, &judge, &ctx.eval_scorer)?;
    let out = json!({ "config": cfg, "seed": seed, "split": split, "report": report });
    match &a.out {
        None => print_json(&out),
        Some(dir) => {
            crate::harness::prepare_output_dir(dir, a.overwrite)?;
            let p = dir.join("report.json");
            fs::write(&p, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&p, e))?;
            let p = dir.join("generations.jsonl");
            let mut lines = String::new();
            for (ex, g) in examples.iter().zip(&gens) {
                let v = json!({
                    "prompt": ctx.dataset.vocab.decode(&ex.prompt)?,
                    "generation": ctx.dataset.vocab.decode(strip_eos(g))?,
                });
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
            fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
            print_json(&json!({ "report": report, "dir": dir }))
        }
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    echo_config(&cfg)?;
    if a.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let g = run_ablation_grid(&cfg, a.axis, &a.values, a.jobs, Some(&a.out), a.overwrite)?;
    for r in &g.rows {
        let metrics: serde_json::Map<String, Value> = r
            .metrics
            .iter()
            .map(|(m, v)| (m.clone(), v.map_or(Value::Null, |(mean, std)| json!([mean, std]))))
            .collect();
        print_json(&json!({
            a.axis.name(): r.value,
            "succeeded": r.succeeded,
            "failed": r.failed,
            "mean_std": metrics,
        }))?;
    }
    for c in &g.cells {
        if let Err(e) = &c.outcome {
            eprintln!("cell {}={} seed {} failed: {e}", a.axis, c.value, c.seed);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// score

fn tokens_of(v: &Value, what: &str, line: usize) -> Result<Vec<String>> {
    let toks: Vec<String> = match v {
        Value::String(s) => s.split_whitespace().map(str::to_owned).collect(),
        Value::Array(a) if a.iter().all(Value::is_string) => {
            a.iter().map(|t| t.as_str().expect("string").to_owned()).collect()
        }
        _ => {
            return Err(Error::Usage(format!(
                "{what} line {line}: expected a string or an array of tokens"
            )))
        }
    };
    Ok(strip_eos_str(toks))
}

fn strip_eos_str(mut toks: Vec<String>) -> Vec<String> {
    if toks.last().is_some_and(|t| t == EOS) {
        toks.pop();
    }
    toks
}

fn read_lines(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Usage(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn candidate(v: &Value, line: usize) -> Result<Vec<String>> {
    match v.get("generation") {
        Some(g) => tokens_of(g, "candidates", line),
        None => tokens_of(v, "candidates", line),
    }
}

fn reference(v: &Value, line: usize) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let what = "references";
    match v {
        Value::Object(o) => {
            let refs = match (o.get("references"), o.get("reference")) {
                (Some(Value::Array(rs)), _) => rs.iter().map(|r| tokens_of(r, what, line)).collect::<Result<_>>()?,
                (_, Some(r)) => vec![tokens_of(r, what, line)?],
                _ => return Err(Error::Usage(format!("{what} line {line}: no reference field"))),
            };
            let concepts = o
                .get("concepts")
                .or_else(|| o.get("meta").and_then(|m| m.get("concepts")))
                .map(|c| tokens_of(c, what, line))
                .transpose()?
                .unwrap_or_default();
            Ok((refs, concepts))
        }
        Value::Array(a) if a.iter().all(Value::is_string) => {
            // a list of whitespace-separated references
            Ok((a.iter().map(|r| tokens_of(r, what, line)).collect::<Result<_>>()?, Vec::new()))
        }
        _ => Ok((vec![tokens_of(v, what, line)?], Vec::new())),
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let cands = read_lines(&a.candidates)?;
    let refs = read_lines(&a.references)?;
    if cands.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    let mut items = Vec::with_capacity(cands.len());
    for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
        let (references, concepts) = reference(r, i + 1)?;
        items.push(ScoredItem {
            candidate: candidate(c, i + 1)?,
            references,
            concepts,
        });
    }
    let names: Vec<&str> = if a.metrics.is_empty() {
        METRIC_NAMES
            .iter()
            .copied()
            .filter(|m| *m != "coverage" || items.iter().any(|i| !i.concepts.is_empty()))
            .collect()
    } else {
        for m in &a.metrics {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return Err(Error::Usage(format!(
                    "unknown metric `{m}`; known: {}",
                    METRIC_NAMES.join(", ")
                )));
            }
        }
        a.metrics.iter().map(String::as_str).collect()
    };
    let report = score_corpus(&items, &names)?;
    let v = serde_json::to_value(&report)?;
    match &a.out {
        None => print_json(&v),
        Some(p) => {
            refuse_clobber(p, a.overwrite)?;
            fs::write(p, serde_json::to_string_pretty(&v)?).map_err(|e| Error::io(p, e))
        }
    }
}

// ---------------------------------------------------------------------------
// plot

fn plot(a: PlotArgs) -> Result<()> {
    let first = &a.inputs[0];
    let summary = if first.is_dir() {
        Some(first.join("summary.csv")).filter(|p| p.is_file())
    } else {
        Some(first.clone()).filter(|p| p.file_name().is_some_and(|n| n == "summary.csv"))
    };
    let default_dir = if first.is_dir() {
        first.clone()
    } else {
        first.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let (svg, default_name) = match summary {
        Some(s) if a.inputs.len() == 1 => (ablation_svg(&s)?, "ablation.svg"),
        _ => {
            let mut curves = Vec::new();
            for input in &a.inputs {
                if !input.exists() {
                    return Err(Error::Usage(format!("{} does not exist", input.display())));
                }
                curves.extend(find_curves(input)?);
            }
            if curves.is_empty() {
                return Err(Error::Usage(format!(
                    "no curve.csv or summary.csv found under {}",
                    a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
            let runs = curves.iter().map(|p| read_curve(p)).collect::<Result<Vec<_>>>()?;
            let title = first
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "runs".into());
            (learning_curve_svg(&runs, &title), "curves.svg")
        }
    };
    let out = a.out.clone().unwrap_or_else(|| default_dir.join(default_name));
    refuse_clobber(&out, a.overwrite)?;
    fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
    print_json(&json!({ "svg": out }))
}
