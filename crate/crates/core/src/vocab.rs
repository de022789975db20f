//! Word-level vocabulary shared by the synthetic world, the LM and the prompt files.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
/// Every vocabulary reserves these two ids.
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    mask_id: usize,
    pad_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary with `[PAD]` at id 0 and `[MASK]` at id 1 followed by
    /// `words` in order. Repeated words keep their first id.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![PAD.to_string(), MASK.to_string()];
        let mut token_to_id: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("vocabulary token {w:?} is empty or contains whitespace")));
            }
            if !token_to_id.contains_key(&w) {
                token_to_id.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
            mask_id: MASK_ID,
            pad_id: PAD_ID,
        })
    }

    /// Rebuilds a vocabulary from its full token list (as written by [`Vocabulary::tokens`]).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != MASK {
            return Err(Error::format("vocabulary must start with [PAD] and [MASK]"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
            mask_id: MASK_ID,
            pad_id: PAD_ID,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; every piece must be a known token.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::input(format!("unknown token {t:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_tokens_are_distinct_and_present() {
        let v = Vocabulary::new(["a", "b", "a"]).unwrap();
        assert_eq!(v.len(), 4);
        assert_ne!(v.mask_id(), v.pad_id());
        assert_eq!(v.token(v.mask_id()), Some(MASK));
        assert_eq!(v.id("b"), Some(3));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }

    #[test]
    fn encode_rejects_unknown() {
        let v = Vocabulary::new(["x"]).unwrap();
        assert_eq!(v.encode("x x").unwrap(), vec![2, 2]);
        assert!(matches!(v.encode("x y"), Err(Error::Input(_))));
    }

    #[test]
    fn from_tokens_round_trip() {
        let v = Vocabulary::new(["p", "q"]).unwrap();
        let w = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v, w);
    }
}
