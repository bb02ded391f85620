//! A single training run: phases, periodic validation, learning curve,
//! checkpoints and the final report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{list_checkpoints, prune_checkpoints, Checkpoint, MaskSnapshot};
use super::config::TrainConfig;
use super::{eval_examples, evaluate, prepare_base, prepare_supervised, prepare_task, stream_seed, TaskContext};
use crate::algos::{
    a2c_update, collect_rollout, ppo_update, supervised_loss_value, Algorithm, MaskState, RolloutSpec,
    UpdateStats,
};
use crate::env::TokenEnv;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::optim::Adam;
use crate::model::PolicyModel;
use crate::reward::KlController;

/// Learning-curve columns, in file order.
pub const CURVE_COLUMNS: &[&str] = &[
    "update",
    "task_reward",
    "total_reward",
    "kl",
    "beta",
    "clip_fraction",
    "entropy",
    "policy_loss",
    "value_loss",
    "approx_kl",
    "episode_length",
    "val_task_metric",
    "val_perplexity",
    "val_nll",
    "val_distinct_1",
    "val_distinct_2",
    "val_unique_1",
    "val_unique_2",
    "val_h1",
    "val_h2",
    "val_msttr",
    "val_length",
];

/// One learning-curve row. Training columns describe the rollout and update
/// of that update index (empty at update 0); validation columns are filled
/// on evaluation updates only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub task_reward: Option<f64>,
    pub total_reward: Option<f64>,
    pub kl: Option<f64>,
    /// β the rollout was shaped with.
    pub beta: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub entropy: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub approx_kl: Option<f64>,
    pub episode_length: Option<f64>,
    pub val_task_metric: Option<f64>,
    pub val_perplexity: Option<f64>,
    /// Teacher-forced cross-entropy of the validation references.
    pub val_nll: Option<f64>,
    pub val_distinct_1: Option<f64>,
    pub val_distinct_2: Option<f64>,
    pub val_unique_1: Option<f64>,
    pub val_unique_2: Option<f64>,
    pub val_h1: Option<f64>,
    pub val_h2: Option<f64>,
    pub val_msttr: Option<f64>,
    pub val_length: Option<f64>,
}

impl CurveRow {
    fn set_validation(&mut self, r: &MetricReport, nll: f64) {
        self.val_task_metric = r.get("task_metric");
        self.val_perplexity = r.get("perplexity");
        self.val_nll = Some(nll);
        self.val_distinct_1 = r.get("distinct-1");
        self.val_distinct_2 = r.get("distinct-2");
        self.val_unique_1 = r.get("unique-1");
        self.val_unique_2 = r.get("unique-2");
        self.val_h1 = r.get("h1");
        self.val_h2 = r.get("h2");
        self.val_msttr = r.get("msttr");
        self.val_length = r.get("length");
    }

    fn set_training(&mut self, beta: f64, roll: &crate::algos::Rollout, st: &UpdateStats) {
        self.task_reward = Some(roll.mean_task_reward());
        self.total_reward = Some(roll.mean_total_reward());
        self.kl = Some(roll.mean_kl());
        self.beta = Some(beta);
        self.clip_fraction = Some(st.clip_fraction);
        self.entropy = Some(st.entropy);
        self.policy_loss = Some(st.policy_loss);
        self.value_loss = Some(st.value_loss);
        self.approx_kl = Some(st.approx_kl);
        self.episode_length = Some(roll.mean_length());
    }
}

/// Summary written to `report.json` at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub updates: usize,
    pub val: MetricReport,
    pub test: MetricReport,
    /// Held-out accuracy of the training reward classifier (sentiment only).
    pub classifier_accuracy: Option<f64>,
    pub final_beta: f64,
    pub config: TrainConfig,
}

pub fn run_id(cfg: &TrainConfig, seed: u64) -> String {
    format!("{}-{}-seed{seed}", cfg.task.name(), cfg.algorithm.name().replace('+', "-"))
}

/// Refuses to reuse a non-empty directory unless `overwrite` is set, in
/// which case it is cleared.
pub(crate) fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = match fs::read_dir(dir) {
        Ok(mut it) => it.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(Error::io(dir, e)),
    };
    if occupied {
        if !overwrite {
            return Err(Error::WouldClobber(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stateful training run. Every random draw is derived from the run seed and
/// the update index, so a run resumed from a checkpoint continues exactly as
/// the uninterrupted run would.
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    run_dir: Option<PathBuf>,
    ctx: TaskContext,
    /// Frozen KL reference, which also judges validation perplexity.
    reference: Arc<PolicyModel>,
    policy: PolicyModel,
    adam: Adam,
    mask: Option<MaskState>,
    controller: KlController,
    env: TokenEnv,
    val: Vec<crate::data::Example>,
    update: usize,
    rows: Vec<CurveRow>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("run", &run_id(&self.cfg, self.seed))
            .field("update", &self.update)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// A fresh run kept in memory (no files are written).
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut t = Self::build(cfg, seed)?;
        let mut row = CurveRow::default();
        t.validate_into(&mut row)?;
        t.rows.push(row);
        Ok(t)
    }

    fn build(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ctx = prepare_task(cfg, seed)?;
        let base = prepare_base(cfg, seed)?;
        let start = if cfg.algorithm.uses_supervised() {
            prepare_supervised(cfg, seed)?
        } else {
            base.clone()
        };
        let policy = start.clone_as_actor_critic(stream_seed(seed, "value_head", 0));
        let mask = if cfg.algorithm.uses_mask() {
            Some(MaskState::new(&policy, cfg.algo.top_p, cfg.algo.mask_sync_period)?)
        } else {
            None
        };
        let adam = Adam::new(policy.num_params(), cfg.algo.lr);
        let env = TokenEnv::new(policy.vocab_size(), cfg.decode.max_new_tokens)?;
        let val = eval_examples(cfg, &ctx.dataset.val);
        Ok(Trainer {
            cfg: cfg.clone(),
            seed,
            run_dir: None,
            ctx,
            reference: start,
            policy,
            adam,
            mask,
            controller: KlController::new(&cfg.kl)?,
            env,
            val,
            update: 0,
            rows: Vec::new(),
        })
    }

    /// A fresh run writing to `<output_dir>/<run-id>/`.
    pub fn create(cfg: &TrainConfig, seed: u64, overwrite: bool) -> Result<Self> {
        let dir = cfg.output_dir.join(run_id(cfg, seed));
        prepare_output_dir(&dir, overwrite)?;
        let mut t = Self::new(cfg, seed)?;
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, cfg.to_json_string()?).map_err(|e| Error::io(&cfg_path, e))?;
        t.run_dir = Some(dir);
        t.write_curve()?;
        Ok(t)
    }

    /// Continues from a checkpoint file; outputs go to its directory.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut t = Self::build(&ck.config, ck.seed)?;
        let n = t.policy.num_params();
        for (what, len) in [("policy", ck.policy.len()), ("reference", ck.reference.len())] {
            if len != n {
                return Err(Error::Checkpoint(format!("{what} has {len} parameters, model has {n}")));
            }
        }
        let cfg = t.policy.config().to_owned();
        t.policy = PolicyModel::from_params(cfg, ck.policy)?;
        t.policy.version = ck.version;
        t.reference = Arc::new(PolicyModel::from_params(cfg, ck.reference)?);
        t.adam = ck.adam.into();
        match (&mut t.mask, ck.mask) {
            (Some(m), Some(s)) => {
                m.model = PolicyModel::from_params(cfg, s.params)?;
                m.counter = s.counter;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("masking policy does not match the algorithm".into())),
        }
        t.controller = ck.controller;
        t.update = ck.update;
        t.rows = ck.rows;
        t.run_dir = path.parent().map(Path::to_path_buf);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> &PolicyModel {
        &self.policy
    }

    pub fn reference(&self) -> &PolicyModel {
        &self.reference
    }

    pub fn context(&self) -> &TaskContext {
        &self.ctx
    }

    pub fn controller(&self) -> &KlController {
        &self.controller
    }

    pub fn update_index(&self) -> usize {
        self.update
    }

    pub fn rows(&self) -> &[CurveRow] {
        &self.rows
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    /// Updates this run performs in total (0 for algorithms without RL).
    pub fn total_updates(&self) -> usize {
        if self.cfg.algorithm.uses_rl() {
            self.cfg.algo.updates
        } else {
            0
        }
    }

    pub fn is_finished(&self) -> bool {
        self.update >= self.total_updates()
    }

    fn validate_into(&self, row: &mut CurveRow) -> Result<()> {
        let seed = stream_seed(self.seed, "eval", 0);
        let report = evaluate(
            &self.policy,
            &self.reference,
            &self.val,
            &self.cfg.decode,
            &self.ctx.eval_scorer,
            seed,
        )?;
        let refs: Vec<&crate::data::Example> = self.val.iter().collect();
        let nll = supervised_loss_value(&self.policy, &refs, None)?;
        row.update = self.update;
        row.set_validation(&report, nll);
        Ok(())
    }

    /// One RL update: rollout, advantage estimation, policy update, KL
    /// controller step, mask sync, then validation and checkpointing when
    /// due. Returns the appended curve row.
    pub fn step(&mut self) -> Result<&CurveRow> {
        if self.is_finished() {
            return Err(Error::Config("run has no updates left".into()));
        }
        let u = self.update as u64;
        let a = &self.cfg.algo;
        let beta = self.controller.beta;
        let mut rollout = collect_rollout(&RolloutSpec {
            policy: &self.policy,
            reference: &self.reference,
            mask: self.mask.as_ref(),
            env: self.env,
            examples: &self.ctx.dataset.train,
            decode: &self.cfg.decode,
            scorer: &self.ctx.train_scorer,
            beta,
            n_episodes: a.episodes_per_update,
            seed: stream_seed(self.seed, "rollout", u),
        })?;
        rollout.estimate_advantages(a.gamma, a.lam)?;
        let hp = a.update_params(self.cfg.decode.temperature);
        let useed = stream_seed(self.seed, "update", u);
        let stats = match self.cfg.algorithm {
            Algorithm::A2c => a2c_update(&mut self.policy, &mut self.adam, &rollout, &hp, useed)?,
            _ => ppo_update(&mut self.policy, &mut self.adam, &rollout, &hp, useed)?,
        };
        let kl = rollout.mean_kl();
        if !kl.is_finite() {
            return Err(Error::NonFinite {
                what: "rollout KL",
                detail: format!("update {}", self.update + 1),
            });
        }
        self.controller.update(kl);
        if let Some(m) = self.mask.as_mut() {
            m.sync(&self.policy);
        }
        self.update += 1;

        let mut row = CurveRow {
            update: self.update,
            ..Default::default()
        };
        row.set_training(beta, &rollout, &stats);
        let every = self.cfg.eval.interval;
        if self.is_finished() || (every > 0 && self.update % every == 0) {
            self.validate_into(&mut row)?;
        }
        self.rows.push(row);

        if self.run_dir.is_some() {
            self.write_curve()?;
            let every = self.cfg.checkpoint.interval;
            if every > 0 && self.update % every == 0 {
                self.save_checkpoint()?;
            }
        }
        Ok(self.rows.last().expect("row just pushed"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            seed: self.seed,
            update: self.update,
            policy: self.policy.params().to_vec(),
            version: self.policy.version,
            reference: self.reference.params().to_vec(),
            adam: (&self.adam).into(),
            mask: self.mask.as_ref().map(|m| MaskSnapshot {
                params: m.model.params().to_vec(),
                counter: m.counter,
            }),
            controller: self.controller,
            rows: self.rows.clone(),
        }
    }

    /// Writes `step-<n>.ckpt` into the run directory and prunes old ones.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("run has no output directory".into()))?;
        let path = dir.join(Checkpoint::file_name(self.update));
        self.checkpoint().save(&path)?;
        prune_checkpoints(dir, self.cfg.checkpoint.keep.max(1))?;
        Ok(path)
    }

    fn write_curve(&self) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            write_csv(&dir.join("curve.csv"), &self.rows)?;
        }
        Ok(())
    }

    /// Runs the remaining updates.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Final validation and test evaluation; writes `report.json`.
    pub fn finish(mut self) -> Result<RunReport> {
        self.run_to_end()?;
        let seed = stream_seed(self.seed, "eval", 0);
        let test = eval_examples(&self.cfg, &self.ctx.dataset.test);
        let (val, test) = rayon::join(
            || evaluate(&self.policy, &self.reference, &self.val, &self.cfg.decode, &self.ctx.eval_scorer, seed),
            || evaluate(&self.policy, &self.reference, &test, &self.cfg.decode, &self.ctx.eval_scorer, seed),
        );
        let report = RunReport {
            run_id: run_id(&self.cfg, self.seed),
            seed: self.seed,
            updates: self.update,
            val: val?,
            test: test?,
            classifier_accuracy: self.ctx.classifier.as_ref().map(|c| c.accuracy),
            final_beta: self.controller.beta,
            config: self.cfg.clone(),
        };
        if let Some(dir) = &self.run_dir {
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(report)
    }

    /// Latest checkpoint in a run directory.
    pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
        Ok(list_checkpoints(dir)?.pop().map(|(_, p)| p))
    }
}

/// One complete run for `seed` writing to `<output_dir>/<run-id>/`.
pub fn train_seed(cfg: &TrainConfig, seed: u64, overwrite: bool) -> Result<RunReport> {
    Trainer::create(cfg, seed, overwrite)?.finish()
}

/// Runs every seed of `cfg` (in parallel) and returns one report per seed.
pub fn train(cfg: &TrainConfig, overwrite: bool) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| train_seed(cfg, s, overwrite)).collect()
}
