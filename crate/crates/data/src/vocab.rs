//! Closed token vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::grammar::EOS;
use crate::sample::TaskSample;
use crate::DataError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;

    /// Specials first, then every token seen in the samples in sorted order.
    pub fn build<'a>(samples: impl IntoIterator<Item = &'a TaskSample>) -> Self {
        let mut seen = BTreeSet::new();
        for s in samples {
            for t in s.instruction.iter().chain(&s.text).chain(&s.answer) {
                seen.insert(t.clone());
            }
        }
        let specials = [PAD, BOS, EOS, UNK];
        for sp in specials {
            seen.remove(sp);
        }
        let tokens = specials.iter().map(|s| s.to_string()).chain(seen).collect();
        Self::from_tokens(tokens).expect("specials lead")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        let specials = [PAD, BOS, EOS, UNK];
        if tokens.len() < specials.len() || tokens[..4].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(DataError::Vocab("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("duplicate token `{t}`")));
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = DataError;

    fn try_from(tokens: Vec<String>) -> Result<Self, DataError> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
