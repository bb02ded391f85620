//! Run configuration, its JSON form, and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::algos::{Algorithm, UpdateParams};
use crate::data::{Sizes, TaskKind};
use crate::error::{Error, Result};
use crate::model::decode::DecodeConfig;
use crate::model::ModelConfig;
use crate::reward::{ClassifierSettings, KlSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub algorithm: Algorithm,
    /// Seeds to run; `train` produces one run per seed.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub base: PhaseConfig,
    pub supervised: PhaseConfig,
    pub algo: AlgoConfig,
    pub kl: KlSettings,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub checkpoint: CheckpointConfig,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::SentimentContinuation,
            algorithm: Algorithm::Ppo,
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            base: PhaseConfig {
                steps: 300,
                batch_size: 32,
                lr: 3e-3,
                max_grad_norm: 1.0,
            },
            supervised: PhaseConfig {
                steps: 300,
                batch_size: 32,
                lr: 3e-3,
                max_grad_norm: 1.0,
            },
            algo: AlgoConfig::default(),
            kl: KlSettings::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            checkpoint: CheckpointConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset seed, independent of the run seeds so that every run of a
    /// grid sees the same data.
    pub seed: u64,
    pub sizes: Sizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            sizes: Sizes::default(),
        }
    }
}

/// A teacher-forced training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub updates: usize,
    pub episodes_per_update: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lam: f64,
    pub epochs: usize,
    /// Minimum steps per minibatch; whole episodes are packed until reached.
    pub minibatch_size: usize,
    pub eps_clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    /// NLPO nucleus fraction.
    pub top_p: f64,
    /// NLPO masking-policy sync period, in updates.
    pub mask_sync_period: usize,
    pub allow_dropout_in_rl: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            updates: 200,
            episodes_per_update: 64,
            lr: 3e-5,
            gamma: 0.95,
            lam: 0.95,
            epochs: 5,
            minibatch_size: 64,
            eps_clip: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            top_p: 0.9,
            mask_sync_period: 5,
            allow_dropout_in_rl: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Fraction of labels the training reward classifier sees.
    pub classifier_fraction: f64,
    /// Weight of concept coverage against ROUGE-L in the coverage reward.
    pub coverage_weight: f64,
    pub classifier: ClassifierSettings,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            classifier_fraction: 1.0,
            coverage_weight: 1.0,
            classifier: ClassifierSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Validation every this many updates (0 disables intermediate
    /// evaluation; the final one always runs).
    pub interval: usize,
    /// Cap on validation prompts (0 means all).
    pub max_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 10,
            max_examples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Checkpoint every this many updates (0 disables).
    pub interval: usize,
    /// Most recent checkpoints kept on disk.
    pub keep: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            interval: 10,
            keep: 3,
        }
    }
}

impl AlgoConfig {
    pub fn update_params(&self, temperature: f64) -> UpdateParams {
        UpdateParams {
            epochs: self.epochs,
            minibatch_size: self.minibatch_size,
            eps_clip: self.eps_clip,
            vf_coef: self.vf_coef,
            ent_coef: self.ent_coef,
            max_grad_norm: self.max_grad_norm,
            temperature,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.decode.validate()?;
        let z = &self.data.sizes;
        if z.train == 0 || z.val == 0 || z.test == 0 {
            return bad("data.sizes train, val and test must be positive".into());
        }
        let need = crate::data::MAX_PROMPT_LEN + self.decode.max_new_tokens;
        if self.model.context_len < need {
            return bad(format!(
                "model.context_len {} is shorter than the longest prompt plus horizon ({need})",
                self.model.context_len
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let a = &self.algo;
        if !(0.0..=1.0).contains(&a.gamma) || !(0.0..=1.0).contains(&a.lam) {
            return bad("gamma and lam must lie in [0, 1]".into());
        }
        if self.algorithm.uses_rl() && (a.updates == 0 || a.episodes_per_update == 0) {
            return bad("updates and episodes_per_update must be positive".into());
        }
        if !(a.lr > 0.0) {
            return bad("algo.lr must be positive".into());
        }
        if !(a.top_p > 0.0 && a.top_p <= 1.0) || a.mask_sync_period == 0 {
            return bad("top_p must lie in (0, 1] and mask_sync_period be positive".into());
        }
        for (name, p) in [("base", &self.base), ("supervised", &self.supervised)] {
            if p.batch_size == 0 || !(p.lr > 0.0) {
                return bad(format!("{name}: batch_size and lr must be positive"));
            }
        }
        let r = &self.reward;
        if !(r.classifier_fraction > 0.0 && r.classifier_fraction <= 1.0) {
            return bad("reward.classifier_fraction must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&r.coverage_weight) {
            return bad("reward.coverage_weight must lie in [0, 1]".into());
        }
        if self.algorithm.uses_rl() && self.model.dropout > 0.0 && !a.allow_dropout_in_rl {
            return bad(
                "dropout > 0 destabilizes policy-gradient training; set algo.allow_dropout_in_rl to override"
                    .into(),
            );
        }
        crate::reward::KlController::new(&self.kl)?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides; values parse as JSON when they can and
    /// as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let (key, value) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{}` is not key=value", o.as_ref())))?;
            set_path(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()))
}

/// Sets `a.b.c` in a JSON tree. Missing keys are created so that the
/// subsequent strict deserialization reports them as unknown.
pub fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() {
        return Err(Error::Usage("empty override key".into()));
    }
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_owned())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}
