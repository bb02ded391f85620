//! Experiment orchestration: task preparation, the pretrained base model,
//! evaluation, training runs with checkpoints, and ablation grids.

mod checkpoint;
pub mod config;
mod grid;
mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use grid::{mean_std, run_ablation_grid, AblationAxis, GridCell, GridResult, GridRow, GRID_METRICS};
pub(crate) use trainer::prepare_output_dir;
pub use trainer::{run_id, train, train_seed, CurveRow, RunReport, Trainer, CURVE_COLUMNS};

use std::collections::HashMap;

use std::sync::{Arc, LazyLock, Mutex};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::algos::{generate, supervised_update};
use crate::data::{generate_task_dataset, strip_eos, Dataset, Example, TaskKind};
use crate::error::Result;
use crate::metrics::{perplexity, score_corpus, MetricReport, ScoredItem};
use crate::model::decode::DecodeConfig;
use crate::model::optim::Adam;
use crate::model::{mix_seed, ModelConfig, PolicyModel};
use crate::reward::{sentiment_labels, ClassifierReward, TaskScorer};
use config::PhaseConfig;

/// Seed for a named randomness stream of a run.
pub fn stream_seed(seed: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a of the stream name keeps stream identities stable across builds
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix_seed(mix_seed(seed, h), index)
}

/// Task data and reward models shared by every run with the same data and
/// reward settings.
#[derive(Debug)]
pub struct TaskContext {
    pub dataset: Dataset,
    /// Reward used during training.
    pub train_scorer: TaskScorer,
    /// Reward used to report the validation task metric; for the sentiment
    /// task this is a classifier trained on all labels.
    pub eval_scorer: TaskScorer,
    pub classifier: Option<ClassifierReward>,
}

struct Memo<V> {
    map: LazyLock<Mutex<HashMap<String, Arc<V>>>>,
}

impl<V> Memo<V> {
    const fn new() -> Self {
        Memo {
            map: LazyLock::new(|| Mutex::new(HashMap::new())),
        }
    }

    /// Deterministic computations only: a racing duplicate computes the same
    /// value.
    fn get_or(&self, key: String, f: impl FnOnce() -> Result<V>) -> Result<Arc<V>> {
        if let Some(v) = self.map.lock().expect("unpoisoned").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(f()?);
        self.map
            .lock()
            .expect("unpoisoned")
            .entry(key)
            .or_insert_with(|| v.clone());
        Ok(v)
    }
}

static DATASETS: Memo<Dataset> = Memo::new();
static CLASSIFIERS: Memo<ClassifierReward> = Memo::new();
static BASES: Memo<PolicyModel> = Memo::new();
static SUPERVISED: Memo<PolicyModel> = Memo::new();

fn key<T: serde::Serialize + ?Sized>(parts: &T) -> String {
    serde_json::to_string(parts).expect("config values serialize")
}

fn dataset(cfg: &TrainConfig) -> Result<Arc<Dataset>> {
    DATASETS.get_or(key(&(cfg.task, cfg.data)), || {
        generate_task_dataset(cfg.task, cfg.data.seed, cfg.data.sizes)
    })
}

fn classifier(cfg: &TrainConfig, ds: &Dataset, fraction: f64, seed: u64) -> Result<Arc<ClassifierReward>> {
    CLASSIFIERS.get_or(key(&(cfg.task, cfg.data, cfg.reward.classifier, fraction, seed)), || {
        let labeled = sentiment_labels(&ds.generic, &ds.vocab)?;
        ClassifierReward::train(&labeled, fraction, seed, &cfg.reward.classifier)
    })
}

/// Dataset and reward functions for `cfg` and run seed `seed`.
pub fn prepare_task(cfg: &TrainConfig, seed: u64) -> Result<TaskContext> {
    let ds = dataset(cfg)?;
    let (train_scorer, eval_scorer, clf) = match cfg.task {
        TaskKind::SentimentContinuation => {
            let judge = classifier(cfg, &ds, 1.0, stream_seed(cfg.data.seed, "reward", 0))?;
            let train = if cfg.reward.classifier_fraction >= 1.0 {
                judge.clone()
            } else {
                classifier(cfg, &ds, cfg.reward.classifier_fraction, stream_seed(seed, "reward", 0))?
            };
            (
                TaskScorer::Sentiment(train.bind(&ds.vocab)),
                TaskScorer::Sentiment(judge.bind(&ds.vocab)),
                Some((*train).clone()),
            )
        }
        TaskKind::ConceptCoverage => {
            let s = TaskScorer::Coverage {
                coverage_weight: cfg.reward.coverage_weight,
            };
            (s.clone(), s, None)
        }
        TaskKind::KeyValueVerbalization => (TaskScorer::KeyValue, TaskScorer::KeyValue, None),
    };
    Ok(TaskContext {
        dataset: (*ds).clone(),
        train_scorer,
        eval_scorer,
        classifier: clf,
    })
}

pub(crate) fn model_config(cfg: &TrainConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        vocab_size: ds.vocab.len(),
        ..cfg.model
    }
}

/// One teacher-forced step of a phase; the batch for step `k` depends only
/// on `(seed, k)`.
pub(crate) fn phase_step(
    model: &mut PolicyModel,
    adam: &mut Adam,
    examples: &[Example],
    phase: &PhaseConfig,
    seed: u64,
    k: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
    let n = phase.batch_size.min(examples.len());
    let batch: Vec<&Example> = sample(&mut rng, examples.len(), n)
        .into_iter()
        .map(|i| &examples[i])
        .collect();
    let dropout = (model.config().dropout > 0.0).then(|| mix_seed(seed ^ 0xd509, k as u64));
    Ok(supervised_update(model, adam, &batch, phase.max_grad_norm, dropout)?.loss)
}

fn run_phase(
    mut model: PolicyModel,
    examples: &[Example],
    phase: &PhaseConfig,
    seed: u64,
) -> Result<PolicyModel> {
    let mut adam = Adam::new(model.num_params(), phase.lr);
    for k in 0..phase.steps {
        phase_step(&mut model, &mut adam, examples, phase, seed, k)?;
    }
    model.version = 0;
    Ok(model)
}

/// The common pretrained language model: a fresh model after a short
/// teacher-forced pass over the task's generic corpus. It initializes every
/// run, is the KL reference of plain RL runs, and scores validation
/// perplexity.
pub fn prepare_base(cfg: &TrainConfig, seed: u64) -> Result<Arc<PolicyModel>> {
    let ds = dataset(cfg)?;
    let mc = model_config(cfg, &ds);
    BASES.get_or(key(&(cfg.task, cfg.data, mc, cfg.base, seed)), || {
        let init = PolicyModel::new(mc, stream_seed(seed, "init", 0))?;
        run_phase(init, &ds.generic, &cfg.base, stream_seed(seed, "base", 0))
    })
}

/// The base model after the supervised phase on the task's train split.
pub fn prepare_supervised(cfg: &TrainConfig, seed: u64) -> Result<Arc<PolicyModel>> {
    let ds = dataset(cfg)?;
    let mc = model_config(cfg, &ds);
    let base = prepare_base(cfg, seed)?;
    SUPERVISED.get_or(key(&(cfg.task, cfg.data, mc, cfg.base, cfg.supervised, seed)), || {
        run_phase((*base).clone(), &ds.train, &cfg.supervised, stream_seed(seed, "supervised", 0))
    })
}

/// Generates one continuation per example with `decode` and scores the
/// corpus: `task_metric` (mean of `scorer`), `perplexity` of the generated
/// tokens under `judge`, `length`, n-gram overlap with the references and
/// the diversity statistics. Pure in `(policy, examples, decode, seed)`.
pub fn evaluate(
    policy: &PolicyModel,
    judge: &PolicyModel,
    examples: &[Example],
    decode: &DecodeConfig,
    scorer: &TaskScorer,
    seed: u64,
) -> Result<MetricReport> {
    let gens = generate_all(policy, examples, decode, seed)?;
    score_generations(examples, &gens, judge, scorer)
}

/// One continuation per example; example `i` samples with seed
/// `mix_seed(seed, i)`.
pub fn generate_all(
    policy: &PolicyModel,
    examples: &[Example],
    decode: &DecodeConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| generate(policy, &ex.prompt, decode, decode.max_new_tokens, mix_seed(seed, i as u64)))
        .collect()
}

/// Scores given generations (each optionally ending in EOS).
pub fn score_generations(
    examples: &[Example],
    generations: &[Vec<usize>],
    judge: &PolicyModel,
    scorer: &TaskScorer,
) -> Result<MetricReport> {
    let mut task = 0.0;
    let mut items = Vec::with_capacity(examples.len());
    let mut ppl_items = Vec::with_capacity(examples.len());
    let mut length = 0.0;
    for (ex, g) in examples.iter().zip(generations) {
        let body = strip_eos(g);
        task += scorer.score(body, ex)?;
        length += body.len() as f64;
        items.push(ScoredItem {
            candidate: body.to_vec(),
            references: vec![ex.reference_body().to_vec()],
            concepts: ex.concepts().map(<[usize]>::to_vec).unwrap_or_default(),
        });
        ppl_items.push((ex.prompt.clone(), g.clone()));
    }
    let mut names = vec![
        "bleu", "rouge-l", "distinct-1", "distinct-2", "unique-1", "unique-2", "h1", "h2", "msttr",
    ];
    if scorer.task() == TaskKind::ConceptCoverage {
        names.push("coverage");
    }
    let mut report = score_corpus(&items, &names)?;
    let n = examples.len().max(1) as f64;
    report.insert("task_metric", task / n);
    report.insert("length", length / n);
    if ppl_items.iter().any(|(_, g)| !g.is_empty()) {
        report.insert("perplexity", perplexity(judge, &ppl_items)?);
    }
    Ok(report)
}

/// The evaluated prefix of `examples` under `cfg.eval.max_examples`.
pub(crate) fn eval_examples(cfg: &TrainConfig, examples: &[Example]) -> Vec<Example> {
    let n = if cfg.eval.max_examples == 0 {
        examples.len()
    } else {
        cfg.eval.max_examples.min(examples.len())
    };
    examples[..n].to_vec()
}
