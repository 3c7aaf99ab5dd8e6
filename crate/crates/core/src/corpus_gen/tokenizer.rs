use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Closed word-level vocabulary. Id 0 is `<pad>`, id 1 is `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_list(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list; `<pad>` and `<unk>`
    /// are placed first if missing and duplicates are rejected.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = alloc::vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in tokens {
            let t = t.as_ref();
            if t == PAD_TOKEN || t == UNK_TOKEN {
                continue;
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Spec(alloc::format!("invalid token {t:?}")));
            }
            list.push(t.to_string());
        }
        Self::from_list(list)
    }

    /// Restores a vocabulary saved with [`Vocab::tokens`].
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Spec("vocabulary must start with <pad> <unk>".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Spec(alloc::format!("duplicate token {t:?}")));
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(1))
            .collect()
    }

    /// Whitespace split, unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(1))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}
