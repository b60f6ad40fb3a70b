use std::collections::HashMap;

use super::Episode;
use crate::error::{invalid, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token ↔ id map with the four specials at ids 0–3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Rank tokens by frequency (descending, ties lexicographic), drop those
    /// below `min_freq`, and keep at most `max_size` entries including specials.
    pub fn build<'a, I>(sentences: I, max_size: usize, min_freq: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < SPECIALS.len() + 1 {
            return Err(invalid!(
                "vocabulary size {max_size} too small (needs at least {})",
                SPECIALS.len() + 1
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Vocab::from_tokens(tokens)
    }

    /// Rebuild from an id-ordered token list (checkpoint form).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(invalid!("token list must start with the special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(invalid!("duplicate token `{t}`"));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for `ids`, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Vocabulary over every utterance, reference and pool sentence of `episodes`.
pub fn build_vocab(episodes: &[Episode], max_size: usize, min_freq: usize) -> Result<Vocab> {
    if episodes.is_empty() {
        return Err(invalid!("cannot build a vocabulary from an empty corpus"));
    }
    let sentences = episodes.iter().flat_map(|e| {
        e.turns.iter().flat_map(|t| {
            std::iter::once(t.apprentice.as_slice())
                .chain(t.references.iter().map(|r| r.as_slice()))
                .chain(t.pool.sentences().iter().map(|s| s.as_slice()))
        })
    });
    Vocab::build(sentences, max_size, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn frequency_then_lexicographic() {
        let s = tokenize("a b b");
        let v = Vocab::build([s.as_slice()], 100, 1).unwrap();
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.token(0), "<pad>");
        let s2 = tokenize("c a b");
        let v2 = Vocab::build([s2.as_slice()], 100, 1).unwrap();
        assert_eq!((v2.id("a"), v2.id("b"), v2.id("c")), (4, 5, 6));
    }

    #[test]
    fn min_freq_and_size_limits() {
        let s = tokenize("a b b");
        let v = Vocab::build([s.as_slice()], 100, 2).unwrap();
        assert_eq!(v.id("a"), UNK);
        assert_eq!(v.id("b"), 4);
        assert!(Vocab::build([s.as_slice()], 4, 1).is_err());
        let v = Vocab::build([s.as_slice()], 5, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn deterministic_rebuild() {
        let s = tokenize("the quick brown fox jumps over the lazy dog dog");
        let a = Vocab::build([s.as_slice()], 50, 1).unwrap();
        let b = Vocab::build([s.as_slice()], 50, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(Vocab::from_tokens(a.tokens().to_vec()).unwrap(), a);
    }

    #[test]
    fn decode_stops_at_eos() {
        let s = tokenize("x y");
        let v = Vocab::build([s.as_slice()], 10, 1).unwrap();
        let ids = [BOS, v.id("x"), v.id("y"), EOS, v.id("x")];
        assert_eq!(v.decode(&ids), vec!["x", "y"]);
    }
}
