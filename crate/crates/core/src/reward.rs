//! Task rewards, per-token KL shaping and the adaptive KL coefficient.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Example, Meta, Sentiment, TaskKind};
use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::metrics::{coverage, rouge, RougeVariant};
use crate::vocab::{TokenId, Vocabulary};

/// Shaped per-step rewards `R̂_t = R_t − β (log π(a_t) − log ρ(a_t))`, where
/// `R_t` is `task_reward` on the last step and zero elsewhere.
pub fn kl_regularized_rewards(
    log_pi: &[f64],
    log_ref: &[f64],
    task_reward: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if log_pi.len() != log_ref.len() {
        return Err(Error::LengthMismatch {
            what: "policy and reference log-probs",
            left: log_pi.len(),
            right: log_ref.len(),
        });
    }
    let n = log_pi.len();
    Ok(log_pi
        .iter()
        .zip(log_ref)
        .enumerate()
        .map(|(t, (lp, lr))| {
            let r = if t + 1 == n { task_reward } else { 0.0 };
            r - beta * (lp - lr)
        })
        .collect())
}

/// Desired per-token KL; `Infinite` disables the penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKl {
    Finite(f64),
    Infinite,
}

impl TargetKl {
    pub fn is_infinite(self) -> bool {
        matches!(self, TargetKl::Infinite)
    }
}

impl fmt::Display for TargetKl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetKl::Finite(v) => write!(f, "{v}"),
            TargetKl::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for TargetKl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Infinity" => Ok(TargetKl::Infinite),
            v => v
                .parse::<f64>()
                .map(|x| if x.is_infinite() { TargetKl::Infinite } else { TargetKl::Finite(x) })
                .map_err(|_| Error::Config(format!("bad target KL `{s}`"))),
        }
    }
}

impl Serialize for TargetKl {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetKl::Finite(v) => s.serialize_f64(*v),
            TargetKl::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TargetKl {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(TargetKl::Finite(v)),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlSettings {
    pub initial_beta: f64,
    pub target: TargetKl,
    pub gain: f64,
    pub clip: f64,
}

impl Default for KlSettings {
    fn default() -> Self {
        KlSettings {
            initial_beta: 0.01,
            target: TargetKl::Finite(0.05),
            gain: 0.1,
            clip: 0.2,
        }
    }
}

/// Proportional controller steering β so the measured KL tracks a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlController {
    pub beta: f64,
    pub target: TargetKl,
    pub gain: f64,
    pub clip: f64,
}

impl KlController {
    pub fn new(settings: &KlSettings) -> Result<Self> {
        let beta = match settings.target {
            TargetKl::Infinite => 0.0,
            TargetKl::Finite(t) if !(t > 0.0 && t.is_finite()) => {
                return Err(Error::Config(format!("target KL must be positive, got {t}")))
            }
            TargetKl::Finite(_) if !(settings.initial_beta > 0.0) => {
                return Err(Error::Config("initial beta must be positive".into()))
            }
            TargetKl::Finite(_) => settings.initial_beta,
        };
        Ok(KlController {
            beta,
            target: settings.target,
            gain: settings.gain,
            clip: settings.clip,
        })
    }

    /// One controller step; returns the new β.
    pub fn update(&mut self, measured_kl: f64) -> f64 {
        if let TargetKl::Finite(target) = self.target {
            let measured = measured_kl.max(0.0);
            let e = ((measured - target) / target).clamp(-self.clip, self.clip);
            self.beta *= 1.0 + self.gain * e;
        }
        self.beta
    }
}

// ---------------------------------------------------------------------------
// Learned sentiment reward

fn features<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut f: Vec<String> = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
    for w in tokens.windows(2) {
        f.push(format!("{} {}", w[0].as_ref(), w[1].as_ref()));
    }
    f
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-3,
            holdout_fraction: 0.2,
        }
    }
}

/// Logistic regression over unigram and bigram counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReward {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
    pub accuracy: f64,
    pub train_fraction: f64,
}

impl ClassifierReward {
    /// Trains on a seeded `train_fraction` subsample of the non-held-out
    /// part of `labeled`; accuracy is measured on the held-out part.
    pub fn train(
        labeled: &[(Vec<String>, bool)],
        train_fraction: f64,
        seed: u64,
        settings: &ClassifierSettings,
    ) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} outside (0, 1]"
            )));
        }
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        // the held-out split depends only on the data so that accuracies at
        // different fractions are comparable
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
        let n_hold = ((labeled.len() as f64) * settings.holdout_fraction).round() as usize;
        let (hold, pool) = order.split_at(n_hold.min(labeled.len()));
        let mut pool = pool.to_vec();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((pool.len() as f64) * train_fraction).ceil() as usize;
        let train = &pool[..n_train.min(pool.len())];
        let positives = train.iter().filter(|&&i| labeled[i].1).count();
        if positives == 0 || positives == train.len() {
            return Err(Error::SingleClass);
        }

        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let rows: Vec<(Vec<(usize, f64)>, f64)> = train
            .iter()
            .map(|&i| {
                let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
                for f in features(&labeled[i].0) {
                    let next = index.len();
                    let j = *index.entry(f).or_insert(next);
                    *counts.entry(j).or_default() += 1.0;
                }
                (counts.into_iter().collect(), if labeled[i].1 { 1.0 } else { 0.0 })
            })
            .collect();
        let mut w = vec![0.0; index.len()];
        let mut b = 0.0;
        let n = rows.len() as f64;
        for _ in 0..settings.iterations {
            let mut gw = vec![0.0; w.len()];
            let mut gb = 0.0;
            for (x, y) in &rows {
                let z = b + x.iter().map(|&(j, c)| w[j] * c).sum::<f64>();
                let err = sigmoid(z) - y;
                gb += err;
                for &(j, c) in x {
                    gw[j] += err * c;
                }
            }
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= settings.learning_rate * (g / n + settings.l2 * *wj);
            }
            b -= settings.learning_rate * gb / n;
        }
        let weights: BTreeMap<String, f64> =
            index.into_iter().map(|(f, j)| (f, w[j])).collect();
        let mut clf = ClassifierReward {
            weights,
            bias: b,
            accuracy: 0.0,
            train_fraction,
        };
        let eval: Vec<usize> = if hold.is_empty() { train.to_vec() } else { hold.to_vec() };
        let correct = eval
            .iter()
            .filter(|&&i| (clf.score(&labeled[i].0) >= 0.5) == labeled[i].1)
            .count();
        clf.accuracy = correct as f64 / eval.len() as f64;
        Ok(clf)
    }

    /// Probability that `tokens` is positive.
    pub fn score<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        let z = self.bias
            + features(tokens)
                .iter()
                .map(|f| self.weights.get(f).copied().unwrap_or(0.0))
                .sum::<f64>();
        sigmoid(z)
    }

    /// Id-indexed copy for fast scoring.
    pub fn bind(&self, vocab: &Vocabulary) -> BoundClassifier {
        let mut unigram = vec![0.0; vocab.len()];
        let mut bigram = HashMap::new();
        for (f, &w) in &self.weights {
            match f.split_once(' ') {
                None => {
                    if let Ok(id) = vocab.id(f) {
                        unigram[id] = w;
                    }
                }
                Some((a, b)) => {
                    if let (Ok(a), Ok(b)) = (vocab.id(a), vocab.id(b)) {
                        bigram.insert((a, b), w);
                    }
                }
            }
        }
        BoundClassifier {
            unigram,
            bigram,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundClassifier {
    unigram: Vec<f64>,
    bigram: HashMap<(TokenId, TokenId), f64>,
    bias: f64,
}

impl BoundClassifier {
    pub fn score(&self, ids: &[TokenId]) -> f64 {
        let mut z = self.bias;
        for &t in ids {
            z += self.unigram.get(t).copied().unwrap_or(0.0);
        }
        for w in ids.windows(2) {
            z += self.bigram.get(&(w[0], w[1])).copied().unwrap_or(0.0);
        }
        sigmoid(z)
    }
}

/// Labeled continuations for classifier training: each example's reference
/// body with its sentiment label.
pub fn sentiment_labels(examples: &[Example], vocab: &Vocabulary) -> Result<Vec<(Vec<String>, bool)>> {
    examples
        .iter()
        .filter_map(|e| match e.meta {
            Meta::Sentiment { label } => Some((e, label)),
            _ => None,
        })
        .map(|(e, label)| Ok((vocab.decode(e.reference_body())?, label == Sentiment::Positive)))
        .collect()
}

// ---------------------------------------------------------------------------
// Task rewards

/// Scores a finished generation for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskScorer {
    Sentiment(BoundClassifier),
    /// `coverage_weight · coverage + (1 − coverage_weight) · ROUGE-L F1`.
    Coverage { coverage_weight: f64 },
    KeyValue,
}

impl TaskScorer {
    pub fn task(&self) -> TaskKind {
        match self {
            TaskScorer::Sentiment(_) => TaskKind::SentimentContinuation,
            TaskScorer::Coverage { .. } => TaskKind::ConceptCoverage,
            TaskScorer::KeyValue => TaskKind::KeyValueVerbalization,
        }
    }

    /// Reward of `generation` (without EOS) for `example`, in `[0, 1]`.
    pub fn score(&self, generation: &[TokenId], example: &Example) -> Result<f64> {
        Ok(match self {
            TaskScorer::Sentiment(clf) => clf.score(generation),
            TaskScorer::Coverage { coverage_weight } => {
                let concepts = example
                    .concepts()
                    .ok_or_else(|| Error::Config("coverage reward needs concept metadata".into()))?;
                let cov = coverage(concepts, generation);
                if *coverage_weight >= 1.0 {
                    cov
                } else {
                    let r = rouge(generation, example.reference_body(), RougeVariant::L).f1;
                    coverage_weight * cov + (1.0 - coverage_weight) * r
                }
            }
            TaskScorer::KeyValue => rouge(generation, example.reference_body(), RougeVariant::L).f1,
        })
    }
}

/// Task reward of a terminal state.
pub fn task_reward(scorer: &TaskScorer, state: &EnvState, example: &Example) -> Result<f64> {
    if !state.is_done() {
        return Err(Error::EpisodeNotDone);
    }
    scorer.score(state.generation(), example)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task_dataset, lexicon, Sizes};
    use crate::env::TokenEnv;
    use crate::vocab::EOS_ID;

    #[test]
    fn shaping_substitution() {
        let r = kl_regularized_rewards(&[-1.0], &[-2.0], 0.5, 0.1).unwrap();
        assert!((r[0] - 0.4).abs() < 1e-15);
        let lp = [-0.3, -1.2, -0.7];
        assert_eq!(kl_regularized_rewards(&lp, &lp, 0.8, 0.3).unwrap(), vec![0.0, 0.0, 0.8]);
        let raw = kl_regularized_rewards(&lp, &[-1.0, -1.0, -1.0], 0.8, 0.0).unwrap();
        assert_eq!(raw, vec![0.0, 0.0, 0.8]);
        assert!(kl_regularized_rewards(&lp, &[-1.0], 0.8, 0.1).is_err());
    }

    #[test]
    fn controller_steps() {
        let mut c = KlController::new(&KlSettings::default()).unwrap();
        assert_eq!(c.update(0.05), 0.01);
        assert!((c.update(0.10) - 0.01 * 1.02).abs() < 1e-15);
        let mut c = KlController::new(&KlSettings {
            target: TargetKl::Infinite,
            ..KlSettings::default()
        })
        .unwrap();
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.update(3.0), 0.0);
        assert!(KlController::new(&KlSettings {
            target: TargetKl::Finite(0.0),
            ..KlSettings::default()
        })
        .is_err());
    }

    #[test]
    fn target_kl_serde() {
        let inf: TargetKl = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(inf, TargetKl::Infinite);
        let f: TargetKl = serde_json::from_str("0.2").unwrap();
        assert_eq!(f, TargetKl::Finite(0.2));
        assert_eq!(serde_json::to_string(&TargetKl::Infinite).unwrap(), "\"inf\"");
        assert_eq!("1.0".parse::<TargetKl>().unwrap(), TargetKl::Finite(1.0));
    }

    fn sentiment_data() -> (Vec<(Vec<String>, bool)>, crate::data::Dataset) {
        let ds = generate_task_dataset(TaskKind::SentimentContinuation, 3, Sizes::default()).unwrap();
        (sentiment_labels(&ds.generic, &ds.vocab).unwrap(), ds)
    }

    #[test]
    fn classifier_learns_and_is_deterministic() {
        let (labeled, ds) = sentiment_data();
        let s = ClassifierSettings::default();
        let clf = ClassifierReward::train(&labeled, 1.0, 1, &s).unwrap();
        assert!(clf.accuracy >= 0.95, "accuracy {}", clf.accuracy);
        assert_eq!(clf, ClassifierReward::train(&labeled, 1.0, 1, &s).unwrap());

        let pos: Vec<&str> = lexicon::POSITIVE[..6].to_vec();
        let neg: Vec<&str> = lexicon::NEGATIVE[..6].to_vec();
        assert!(clf.score(&pos) >= clf.score(&neg));
        let bound = clf.bind(&ds.vocab);
        let ids = ds.vocab.encode(&pos).unwrap();
        assert!((bound.score(&ids) - clf.score(&pos)).abs() < 1e-12);

        let json = serde_json::to_string(&clf).unwrap();
        let back: ClassifierReward = serde_json::from_str(&json).unwrap();
        assert_eq!(back, clf);
    }

    #[test]
    fn single_class_subsample_is_rejected() {
        let labeled: Vec<(Vec<String>, bool)> =
            (0..10).map(|i| (vec![format!("w{i}")], true)).collect();
        assert!(matches!(
            ClassifierReward::train(&labeled, 1.0, 0, &ClassifierSettings::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn task_rewards() {
        let ds = generate_task_dataset(TaskKind::KeyValueVerbalization, 1, Sizes {
            train: 10,
            val: 2,
            test: 2,
            generic: 10,
        })
        .unwrap();
        let ex = &ds.train[0];
        assert_eq!(TaskScorer::KeyValue.score(ex.reference_body(), ex).unwrap(), 1.0);

        let ds = generate_task_dataset(TaskKind::ConceptCoverage, 1, Sizes {
            train: 10,
            val: 2,
            test: 2,
            generic: 10,
        })
        .unwrap();
        let ex = &ds.train[0];
        let pure = TaskScorer::Coverage { coverage_weight: 1.0 };
        assert_eq!(pure.score(&[EOS_ID + 100_000], ex).unwrap(), 0.0);
        assert_eq!(pure.score(ex.reference_body(), ex).unwrap(), 1.0);

        let env = TokenEnv::new(ds.vocab.len(), 4).unwrap();
        let s = env.reset_to(ex);
        assert!(matches!(task_reward(&pure, &s, ex), Err(Error::EpisodeNotDone)));
        let done = env.step(&s, EOS_ID, |_, _| Ok(0.0)).unwrap().state;
        assert_eq!(task_reward(&pure, &done, ex).unwrap(), 0.0);
    }
}
