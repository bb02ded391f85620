//! Synthetic supervised datasets for the three desk tasks.
//!
//! Every dataset is a pure function of `(task, seed, sizes)`. Alongside the
//! train/validation/test splits each dataset carries a *generic* corpus: text
//! from the same grammar whose continuation is not steered toward the task
//! goal. It is used to pretrain the base language model and, for sentiment,
//! as labeled data for the reward classifier.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, EOS, EOS_ID};

pub const MAX_PROMPT_LEN: usize = 12;
/// Longest reference including the trailing EOS.
pub const MAX_REFERENCE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SentimentContinuation,
    ConceptCoverage,
    KeyValueVerbalization,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::SentimentContinuation,
        TaskKind::ConceptCoverage,
        TaskKind::KeyValueVerbalization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SentimentContinuation => "sentiment_continuation",
            TaskKind::ConceptCoverage => "concept_coverage",
            TaskKind::KeyValueVerbalization => "key_value_verbalization",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sentiment {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Meta {
    /// Lexicon-majority label. For the main splits it covers prompt and
    /// reference; for the generic corpus it is the polarity the continuation
    /// was generated with.
    Sentiment { label: Sentiment },
    Concepts { concepts: Vec<TokenId> },
    Record { fields: Vec<(String, String)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    /// Always ends with EOS.
    pub reference: Vec<TokenId>,
    pub meta: Meta,
}

impl Example {
    /// Reference tokens without the trailing EOS.
    pub fn reference_body(&self) -> &[TokenId] {
        strip_eos(&self.reference)
    }

    pub fn concepts(&self) -> Option<&[TokenId]> {
        match &self.meta {
            Meta::Concepts { concepts } => Some(concepts),
            _ => None,
        }
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> Result<Value> {
        let meta = match &self.meta {
            Meta::Sentiment { label } => json!({ "label": label }),
            Meta::Concepts { concepts } => json!({ "concepts": vocab.decode(concepts)? }),
            Meta::Record { fields } => json!({ "record": fields }),
        };
        Ok(json!({
            "prompt": vocab.decode(&self.prompt)?,
            "reference": vocab.decode(&self.reference)?,
            "meta": meta,
        }))
    }

    pub fn from_json(value: &Value, vocab: &Vocabulary) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            prompt: Vec<String>,
            reference: Vec<String>,
            meta: Value,
        }
        let line: Line = serde_json::from_value(value.clone())?;
        let meta = if let Some(label) = line.meta.get("label") {
            Meta::Sentiment {
                label: serde_json::from_value(label.clone())?,
            }
        } else if let Some(c) = line.meta.get("concepts") {
            let c: Vec<String> = serde_json::from_value(c.clone())?;
            Meta::Concepts {
                concepts: vocab.encode(&c)?,
            }
        } else if let Some(r) = line.meta.get("record") {
            Meta::Record {
                fields: serde_json::from_value(r.clone())?,
            }
        } else {
            return Err(Error::Config(format!("unrecognized meta {}", line.meta)));
        };
        Ok(Example {
            prompt: vocab.encode(&line.prompt)?,
            reference: vocab.encode(&line.reference)?,
            meta,
        })
    }
}

pub fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    match ids.split_last() {
        Some((&EOS_ID, rest)) => rest,
        _ => ids,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default = "Sizes::default_generic")]
    pub generic: usize,
}

impl Sizes {
    fn default_generic() -> usize {
        1000
    }
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            train: 1000,
            val: 128,
            test: 128,
            generic: Self::default_generic(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub seed: u64,
    pub sizes: Sizes,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub generic: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Generic => &self.generic,
        }
    }

    /// Writes `vocab.json`, `dataset.json` and one JSONL file per split.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.json");
        fs::write(&vocab_path, serde_json::to_string_pretty(&self.vocab)?)
            .map_err(|e| Error::io(&vocab_path, e))?;
        let manifest = dir.join("dataset.json");
        let m = json!({ "task": self.task, "seed": self.seed, "sizes": self.sizes });
        fs::write(&manifest, serde_json::to_string_pretty(&m)?)
            .map_err(|e| Error::io(&manifest, e))?;
        for (name, split) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("generic", &self.generic),
        ] {
            write_jsonl(&dir.join(format!("{name}.jsonl")), split, &self.vocab)?;
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, &ex.to_json(vocab)?)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Example::from_json(&serde_json::from_str(&line)?, vocab)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lexicons

pub mod lexicon {
    pub const NOUNS: &[&str] = &[
        "movie", "film", "plot", "acting", "story", "cast", "director", "script", "ending",
        "music", "dialogue", "scenery", "soundtrack", "camera", "pacing", "characters",
    ];
    pub const POSITIVE: &[&str] = &[
        "great", "wonderful", "brilliant", "superb", "excellent", "beautiful", "charming",
        "delightful", "fantastic", "moving", "clever", "gripping", "stunning", "lovely",
        "loved", "enjoyed", "adored", "admired", "gem", "masterpiece", "treat",
    ];
    pub const NEGATIVE: &[&str] = &[
        "awful", "boring", "terrible", "dull", "bad", "weak", "poor", "messy", "silly",
        "tedious", "bland", "painful", "horrible", "lame", "hated", "disliked", "loathed",
        "resented", "mess", "disaster", "failure",
    ];
    pub(super) const POS_ADJ: &[&str] = POSITIVE.split_at(14).0;
    pub(super) const NEG_ADJ: &[&str] = NEGATIVE.split_at(14).0;
    pub(super) const NEU_ADJ: &[&str] = &[
        "long", "short", "old", "new", "quiet", "loud", "slow", "simple", "dark", "modern",
        "strange", "familiar",
    ];
    pub(super) const POS_VERB: &[&str] = POSITIVE.split_at(14).1.split_at(4).0;
    pub(super) const NEG_VERB: &[&str] = NEGATIVE.split_at(14).1.split_at(4).0;
    pub(super) const NEU_VERB: &[&str] = &["watched", "saw", "rented", "remember"];
    pub(super) const POS_NOUN: &[&str] = POSITIVE.split_at(18).1;
    pub(super) const NEG_NOUN: &[&str] = NEGATIVE.split_at(18).1;
    pub(super) const NEU_NOUN: &[&str] = &["sequel", "remake", "thriller"];
    pub(super) const ADV: &[&str] = &["really", "very", "quite", "so", "rather", "truly"];
    pub(super) const FUNCTION: &[&str] = &[
        "the", "was", "i", "it", "a", "what", "and", "were", "overall", ".",
    ];

    pub const CONCEPTS: &[&str] = &[
        "dog", "cat", "ball", "park", "river", "boat", "tree", "bench", "child", "kite", "bird",
        "car", "road", "house", "garden", "fence", "table", "chair", "book", "lamp", "window",
        "door", "horse", "field", "rope", "bridge", "flower", "hill", "cloud", "stone",
    ];
    pub(super) const CONNECTORS: &[&str] = &["near", "with", "by", "and", "under"];
    pub(super) const CONCEPT_FUNCTION: &[&str] = &["concepts", ":", "the", "."];

    pub(super) const KEYS: &[&str] = &["name", "job", "city", "pet"];
    pub(super) const NAMES: &[&str] = &["bob", "alice", "carol", "dave", "erin", "frank", "grace", "henry"];
    pub(super) const JOBS: &[&str] = &["chef", "pilot", "nurse", "baker", "farmer", "judge", "painter"];
    pub(super) const CITIES: &[&str] = &["paris", "rome", "tokyo", "lima", "oslo", "cairo", "delhi"];
    pub(super) const PETS: &[&str] = &["dog", "cat", "parrot", "rabbit", "goat", "turtle"];
    pub(super) const KV_FUNCTION: &[&str] = &[
        "=", ";", ".", "works", "as", "a", "lives", "in", "owns", "and",
    ];
}

/// Lexicon majority over a token sequence; `None` on a tie.
pub fn lexicon_polarity<S: AsRef<str>>(tokens: &[S]) -> Option<Sentiment> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for t in tokens {
        let t = t.as_ref();
        if lexicon::POSITIVE.contains(&t) {
            pos += 1;
        } else if lexicon::NEGATIVE.contains(&t) {
            neg += 1;
        }
    }
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(Sentiment::Positive),
        std::cmp::Ordering::Less => Some(Sentiment::Negative),
        std::cmp::Ordering::Equal => None,
    }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Clone, Copy, PartialEq, Eq)]
enum Polarity {
    Pos,
    Neg,
    Neu,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn clause(rng: &mut ChaCha8Rng, pol: Polarity) -> Vec<&'static str> {
    use lexicon::*;
    let (adj, verb, snoun) = match pol {
        Polarity::Pos => (POS_ADJ, POS_VERB, POS_NOUN),
        Polarity::Neg => (NEG_ADJ, NEG_VERB, NEG_NOUN),
        Polarity::Neu => (NEU_ADJ, NEU_VERB, NEU_NOUN),
    };
    let noun = pick(rng, NOUNS);
    match rng.gen_range(0..7) {
        0 => vec!["the", noun, "was", pick(rng, adj), "."],
        1 => vec!["the", noun, "was", pick(rng, ADV), pick(rng, adj), "."],
        2 => vec!["i", pick(rng, verb), "the", noun, "."],
        3 => vec!["it", "was", "a", pick(rng, adj), noun, "."],
        4 => vec!["what", "a", pick(rng, snoun), "."],
        5 => {
            let other = pick(rng, NOUNS);
            vec!["the", noun, "and", "the", other, "were", pick(rng, adj), "."]
        }
        _ => vec!["overall", "it", "was", pick(rng, adj), "."],
    }
}

fn two_clauses(
    rng: &mut ChaCha8Rng,
    max_len: usize,
    mut polarity: impl FnMut(&mut ChaCha8Rng) -> Polarity,
) -> Vec<&'static str> {
    loop {
        let p1 = polarity(rng);
        let mut out = clause(rng, p1);
        let p2 = polarity(rng);
        out.extend(clause(rng, p2));
        if out.len() <= max_len {
            return out;
        }
    }
}

struct Raw {
    prompt: Vec<&'static str>,
    reference: Vec<&'static str>,
    meta: RawMeta,
}

enum RawMeta {
    Label(Sentiment),
    Concepts(Vec<&'static str>),
    Record(Vec<(String, String)>),
}

fn sentiment_prompt(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    two_clauses(rng, MAX_PROMPT_LEN, |r| match r.gen_range(0..3) {
        0 => Polarity::Pos,
        1 => Polarity::Neg,
        _ => Polarity::Neu,
    })
}

fn sentiment_example(rng: &mut ChaCha8Rng) -> Raw {
    let prompt = sentiment_prompt(rng);
    let reference = two_clauses(rng, MAX_REFERENCE_LEN - 1, |r| {
        let u: f64 = r.gen();
        if u < 0.92 {
            Polarity::Pos
        } else if u < 0.99 {
            Polarity::Neu
        } else {
            Polarity::Neg
        }
    });
    let full: Vec<&str> = prompt.iter().chain(&reference).copied().collect();
    let label = lexicon_polarity(&full).unwrap_or(Sentiment::Negative);
    Raw {
        prompt,
        reference,
        meta: RawMeta::Label(label),
    }
}

fn sentiment_generic(rng: &mut ChaCha8Rng) -> Raw {
    let prompt = sentiment_prompt(rng);
    let p_pos = match lexicon_polarity(&prompt) {
        Some(Sentiment::Positive) => 0.7,
        Some(Sentiment::Negative) => 0.3,
        None => 0.5,
    };
    let label = if rng.gen_bool(p_pos) {
        Sentiment::Positive
    } else {
        Sentiment::Negative
    };
    let lean = match label {
        Sentiment::Positive => Polarity::Pos,
        Sentiment::Negative => Polarity::Neg,
    };
    let reference = two_clauses(rng, MAX_REFERENCE_LEN - 1, |r| {
        if r.gen_bool(0.8) {
            lean
        } else {
            Polarity::Neu
        }
    });
    Raw {
        prompt,
        reference,
        meta: RawMeta::Label(label),
    }
}

fn concept_set(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let k = rng.gen_range(3..=5);
    lexicon::CONCEPTS
        .choose_multiple(rng, k)
        .copied()
        .collect()
}

fn concept_sentence(rng: &mut ChaCha8Rng, concepts: &[&'static str]) -> Vec<&'static str> {
    let mut out = vec!["the", concepts[0]];
    for c in &concepts[1..] {
        out.extend([pick(rng, lexicon::CONNECTORS), "the", c]);
    }
    out.push(".");
    out
}

fn concept_example(rng: &mut ChaCha8Rng, generic: bool) -> Raw {
    let concepts = concept_set(rng);
    let mut prompt = vec!["concepts", ":"];
    prompt.extend(&concepts);
    prompt.push(".");
    let reference = if generic {
        let other = concept_set(rng);
        concept_sentence(rng, &other)
    } else {
        concept_sentence(rng, &concepts)
    };
    Raw {
        prompt,
        reference,
        meta: RawMeta::Concepts(concepts),
    }
}

fn record(rng: &mut ChaCha8Rng) -> Vec<(&'static str, &'static str)> {
    use lexicon::*;
    let mut extra = vec![
        ("job", pick(rng, JOBS)),
        ("city", pick(rng, CITIES)),
        ("pet", pick(rng, PETS)),
    ];
    extra.shuffle(rng);
    extra.truncate(2);
    // canonical key order keeps the verbalization a function of the record
    extra.sort_by_key(|(k, _)| KEYS.iter().position(|x| x == k));
    let mut fields = vec![("name", pick(rng, NAMES))];
    fields.extend(extra);
    fields
}

fn verbalize(fields: &[(&'static str, &'static str)]) -> Vec<&'static str> {
    let mut out = vec![fields[0].1];
    for (i, (key, value)) in fields[1..].iter().enumerate() {
        if i > 0 {
            out.push("and");
        }
        match *key {
            "job" => out.extend(["works", "as", "a", value]),
            "city" => out.extend(["lives", "in", value]),
            _ => out.extend(["owns", "a", value]),
        }
    }
    out.push(".");
    out
}

fn key_value_example(rng: &mut ChaCha8Rng, generic: bool) -> Raw {
    let fields = record(rng);
    let mut prompt = Vec::new();
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            prompt.push(";");
        }
        prompt.extend([*k, "=", *v]);
    }
    prompt.push(".");
    let reference = if generic {
        verbalize(&record(rng))
    } else {
        verbalize(&fields)
    };
    Raw {
        prompt,
        reference,
        meta: RawMeta::Record(
            fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        ),
    }
}

fn lexicon_words(task: TaskKind) -> Vec<&'static str> {
    use lexicon::*;
    let groups: Vec<&[&'static str]> = match task {
        TaskKind::SentimentContinuation => vec![
            NOUNS, POSITIVE, NEGATIVE, NEU_ADJ, NEU_VERB, NEU_NOUN, ADV, FUNCTION,
        ],
        TaskKind::ConceptCoverage => vec![CONCEPTS, CONNECTORS, CONCEPT_FUNCTION],
        TaskKind::KeyValueVerbalization => {
            vec![KEYS, NAMES, JOBS, CITIES, PETS, KV_FUNCTION]
        }
    };
    groups.into_iter().flatten().copied().collect()
}

/// Generates the dataset for `task`. Prompts are pairwise distinct across the
/// train, validation and test splits.
pub fn generate_task_dataset(task: TaskKind, seed: u64, sizes: Sizes) -> Result<Dataset> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("every split needs at least one example".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let make = |rng: &mut ChaCha8Rng, generic: bool| match (task, generic) {
        (TaskKind::SentimentContinuation, false) => sentiment_example(rng),
        (TaskKind::SentimentContinuation, true) => sentiment_generic(rng),
        (TaskKind::ConceptCoverage, g) => concept_example(rng, g),
        (TaskKind::KeyValueVerbalization, g) => key_value_example(rng, g),
    };

    let mut seen: HashSet<Vec<&'static str>> = HashSet::new();
    let mut splits: Vec<Vec<Raw>> = Vec::new();
    for n in [sizes.train, sizes.val, sizes.test] {
        let mut split = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while split.len() < n {
            attempts += 1;
            if attempts > 200 * n + 10_000 {
                return Err(Error::Config(format!(
                    "cannot draw {n} distinct prompts for {task}"
                )));
            }
            let raw = make(&mut rng, false);
            if seen.insert(raw.prompt.clone()) {
                split.push(raw);
            }
        }
        splits.push(split);
    }
    let generic: Vec<Raw> = (0..sizes.generic).map(|_| make(&mut rng, true)).collect();

    let mut corpus: Vec<Vec<&str>> = vec![lexicon_words(task)];
    for raw in splits.iter().flatten().chain(&generic) {
        corpus.push(raw.prompt.clone());
        corpus.push(raw.reference.clone());
    }
    let vocab = Vocabulary::build(&corpus)?;

    let encode = |raw: &Raw| -> Result<Example> {
        let mut reference = vocab.encode(&raw.reference)?;
        reference.push(vocab.id(EOS)?);
        let meta = match &raw.meta {
            RawMeta::Label(l) => Meta::Sentiment { label: *l },
            RawMeta::Concepts(c) => Meta::Concepts {
                concepts: vocab.encode(c)?,
            },
            RawMeta::Record(r) => Meta::Record { fields: r.clone() },
        };
        Ok(Example {
            prompt: vocab.encode(&raw.prompt)?,
            reference,
            meta,
        })
    };
    let encode_all = |raws: &[Raw]| raws.iter().map(encode).collect::<Result<Vec<_>>>();

    Ok(Dataset {
        task,
        seed,
        sizes,
        train: encode_all(&splits[0])?,
        val: encode_all(&splits[1])?,
        test: encode_all(&splits[2])?,
        generic: encode_all(&generic)?,
        vocab,
    })
}
