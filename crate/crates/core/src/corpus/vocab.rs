//! Word-level vocabulary with reserved template tokens.
//!
//! Corpus text is tokenized by whitespace splitting. Reserved entries cover
//! padding, sequence start, the ten digit tokens (so document ids decompose
//! into digits), template punctuation, and the multi-word template phrases,
//! each registered as a single vocabulary entry. Reserved tokens are never
//! produced by corpus text tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, TokenId>,
    /// Ids below this bound are reserved (never emitted by text tokenization).
    n_reserved: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized corpus texts plus a
    /// reserved token list. `<pad>` always gets id 0 and `<bos>` id 1,
    /// whether or not the caller listed them; the remaining reserved tokens
    /// keep their given order, then corpus words follow in first-appearance
    /// order. Deterministic given input order.
    pub fn build<S: AsRef<str>>(corpus_texts: &[S], reserved: &[String]) -> Result<Self> {
        if corpus_texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut id_to_token: Vec<String> = vec![PAD_TOKEN.to_string(), BOS_TOKEN.to_string()];
        for tok in reserved {
            if tok == PAD_TOKEN || tok == BOS_TOKEN {
                continue;
            }
            if !id_to_token.iter().any(|t| t == tok) {
                id_to_token.push(tok.clone());
            }
        }
        let n_reserved = id_to_token.len();

        let mut token_to_id: HashMap<String, TokenId> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for text in corpus_texts {
            for word in text.as_ref().split_whitespace() {
                match token_to_id.get(word) {
                    Some(&id) if (id as usize) < n_reserved => {
                        return Err(Error::ReservedTokenCollision(word.to_string()));
                    }
                    Some(_) => {}
                    None => {
                        token_to_id.insert(word.to_string(), id_to_token.len() as TokenId);
                        id_to_token.push(word.to_string());
                    }
                }
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            n_reserved,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn n_reserved(&self) -> usize {
        self.n_reserved
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Like [`Vocabulary::id`] but failing with [`Error::UnknownToken`].
    pub fn require(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < self.n_reserved
    }

    pub fn digit_id(&self, digit: u8) -> Result<TokenId> {
        debug_assert!(digit < 10);
        self.require(&digit.to_string())
    }

    /// Encodes corpus text (whitespace words). Reserved tokens are rejected:
    /// template structure must come from the template assembler, not data.
    pub fn encode_text(&self, words: &[String]) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            let id = self.require(w)?;
            if self.is_reserved(id) {
                return Err(Error::ReservedTokenInText(w.clone()));
            }
            out.push(id);
        }
        Ok(out)
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(json)?;
        if v.id_to_token.is_empty()
            || v.id_to_token[0] != PAD_TOKEN
            || v.id_to_token.len() < 2
            || v.id_to_token[1] != BOS_TOKEN
        {
            return Err(Error::InvalidConfig(
                "vocabulary file must reserve <pad> at id 0 and <bos> at id 1".into(),
            ));
        }
        if v.n_reserved > v.id_to_token.len() {
            return Err(Error::InvalidConfig(
                "vocabulary reserved bound exceeds vocabulary size".into(),
            ));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for t in &v.id_to_token {
                if !seen.insert(t) {
                    return Err(Error::InvalidConfig(format!(
                        "vocabulary file has duplicate token {t:?}"
                    )));
                }
            }
        }
        v.rebuild_index();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_enumeration_with_pad_zero() {
        // Two texts, nothing reserved beyond the implicit pad/bos.
        let v = Vocabulary::build(&["a b", "b c"], &[]).unwrap();
        assert_eq!(v.id(PAD_TOKEN), Some(0));
        assert_eq!(v.id(BOS_TOKEN), Some(1));
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("c"), Some(4));
    }

    #[test]
    fn empty_corpus_rejected() {
        let texts: [&str; 0] = [];
        assert!(matches!(
            Vocabulary::build(&texts, &[]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn deterministic_for_same_corpus() {
        let reserved = vec![":".to_string(), "ID".to_string()];
        let a = Vocabulary::build(&["x y z", "y q"], &reserved).unwrap();
        let b = Vocabulary::build(&["x y z", "y q"], &reserved).unwrap();
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn reserved_collision_names_the_token() {
        let reserved = vec![":".to_string()];
        let err = Vocabulary::build(&["a : b"], &reserved).unwrap_err();
        match err {
            Error::ReservedTokenCollision(t) => assert_eq!(t, ":"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn digits_are_single_tokens() {
        let reserved: Vec<String> = (0..10u8).map(|d| d.to_string()).collect();
        let v = Vocabulary::build(&["hello"], &reserved).unwrap();
        for d in 0..10u8 {
            assert!(v.is_reserved(v.digit_id(d).unwrap()));
        }
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(&["a b c"], &["|".to_string()]).unwrap();
        let j = v.to_json().unwrap();
        let w = Vocabulary::from_json(&j).unwrap();
        assert_eq!(w.id("b"), v.id("b"));
        assert_eq!(w.n_reserved(), v.n_reserved());
    }
}
