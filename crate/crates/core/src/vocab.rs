//! Word-level vocabulary with reserved padding and sequence markers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;

/// Dense bijection between token strings and ids `0..size`.
///
/// Ids 0, 1 and 2 are always `<pad>`, `<bos>` and `<eos>`. The remaining
/// ids are assigned by descending corpus frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocabulary::from_tokens(repr.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            let tok = tok.as_ref();
            if tok == PAD || tok == BOS || tok == EOS {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let tokens = [PAD, BOS, EOS]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from an explicit id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[PAD_ID] != PAD || tokens[BOS_ID] != BOS || tokens[EOS_ID] != EOS
        {
            return Err(Error::Config(
                "vocabulary must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })
    }

    pub fn encode<S: AsRef<str>>(&self, text: &[S]) -> Result<Vec<TokenId>> {
        text.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.token(id).map(str::to_owned))
            .collect()
    }
}

/// Keeps the last `max_len` tokens.
pub fn truncate_left(ids: &[TokenId], max_len: usize) -> &[TokenId] {
    &ids[ids.len().saturating_sub(max_len)..]
}

/// Pads on the left with `<pad>` up to `len`; longer inputs are left-truncated.
pub fn pad_left(ids: &[TokenId], len: usize) -> Vec<TokenId> {
    let ids = truncate_left(ids, len);
    let mut out = vec![PAD_ID; len - ids.len()];
    out.extend_from_slice(ids);
    out
}
