//! Dialogue data model, tokenization, ingestion, synthetic corpora and batching.

mod batch;
mod io;
mod synth;
mod tokenize;
mod vocab;

pub use batch::{make_batches, Batch, EncodedEpisode, EncodedTurn, PaddedSeqs};
pub use io::{load_episodes, parse_episodes, write_episodes, CorpusFormat};
pub use synth::{generate_synthetic, nearest_by_overlap, SynthConfig, FILLER_WORDS};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{build_vocab, TokenId, Vocab, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Literal text of the sentinel pool entry at index 0.
pub const NO_PASSAGES_USED: [&str; 3] = ["no", "passages", "used"];
/// Gold tag meaning "response not grounded in any pool sentence".
pub const NO_PASSAGES_TAG: &str = "no_passages_used";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" | "validation" => Some(Split::Valid),
            "test-seen" | "test_seen" | "test" => Some(Split::TestSeen),
            "test-unseen" | "test_unseen" => Some(Split::TestUnseen),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Candidate knowledge sentences for one turn. Index 0 is always the
/// "no passages used" sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgePool {
    sentences: Vec<Vec<String>>,
    source_ids: Vec<String>,
}

impl KnowledgePool {
    /// Build a pool from sentences listed without the sentinel.
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        let ids = (0..sentences.len()).map(|i| format!("s{i}")).collect();
        Self::with_sources(sentences, ids)
    }

    pub fn with_sources(sentences: Vec<Vec<String>>, source_ids: Vec<String>) -> Self {
        let mut all = Vec::with_capacity(sentences.len() + 1);
        all.push(NO_PASSAGES_USED.iter().map(|s| s.to_string()).collect());
        all.extend(sentences);
        let mut ids = Vec::with_capacity(all.len());
        ids.push(NO_PASSAGES_TAG.to_string());
        ids.extend(source_ids);
        KnowledgePool {
            sentences: all,
            source_ids: ids,
        }
    }

    /// All sentences, sentinel first.
    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    /// Sentences after the sentinel.
    pub fn passages(&self) -> &[Vec<String>] {
        &self.sentences[1..]
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize) -> Option<&[String]> {
        self.sentences.get(i).map(|s| s.as_slice())
    }
}

/// One apprentice/wizard exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    /// Apprentice utterance `x^t`.
    pub apprentice: Vec<String>,
    /// Wizard utterance `y^t`.
    pub wizard: Vec<String>,
    pub pool: KnowledgePool,
    /// Primary gold knowledge index (pool index, sentinel = 0).
    pub gold: Option<usize>,
    /// Further pool indices also counted as correct.
    pub alt_golds: Vec<usize>,
    /// Reference responses; the first equals `wizard`.
    pub references: Vec<Vec<String>>,
}

impl Turn {
    pub fn new(
        apprentice: Vec<String>,
        wizard: Vec<String>,
        pool: KnowledgePool,
        gold: Option<usize>,
    ) -> Self {
        let references = vec![wizard.clone()];
        Turn {
            apprentice,
            wizard,
            pool,
            gold,
            alt_golds: Vec::new(),
            references,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.gold.is_some()
    }

    /// Every pool index accepted as correct for this turn.
    pub fn gold_set(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.gold.into_iter().collect();
        for &g in &self.alt_golds {
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }
}

/// One complete dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub topic: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

impl Episode {
    pub fn labeled_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.is_labeled()).count()
    }

    /// Check pool and label invariants.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::error::invalid;
        if self.turns.is_empty() {
            return Err(invalid!("episode `{}` has no turns", self.topic));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.pool.get(0).map(|s| s != NO_PASSAGES_USED) != Some(false) {
                return Err(invalid!("turn {} pool lacks the sentinel", i + 1));
            }
            for g in t.gold_set() {
                if g >= t.pool.len() {
                    return Err(invalid!(
                        "turn {}: gold {g} outside pool of {}",
                        i + 1,
                        t.pool.len()
                    ));
                }
            }
            if t.references.first() != Some(&t.wizard) {
                return Err(invalid!("turn {}: first reference must equal the response", i + 1));
            }
        }
        Ok(())
    }
}
