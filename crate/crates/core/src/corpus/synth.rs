//! Synthetic knowledge-grounded dialogues with controllable ambiguity.
//!
//! A corpus has a fixed inventory of facts. Each fact is a sentence
//! `key attr attr attr attr`; every key owns several facts and keys are
//! grouped into topics. At each turn the apprentice mentions a key, the pool
//! holds `m` facts about that key (the plausible choices) plus facts about
//! other keys of the topic, and the wizard answers by copying words from the
//! gold fact.
//!
//! With `history_dependent`, one key and one pool are used for the whole
//! episode and the gold fact at turn `t` is drawn among plausible facts not
//! used at earlier turns, so previous selections narrow the current choice.

use serde::{Deserialize, Serialize};

use super::{Episode, KnowledgePool, Split, Turn};
use crate::error::{invalid, Result};
use crate::nn::Rng;

/// Function words used for prompts and response padding. None of them ever
/// appears in a knowledge sentence.
pub const FILLER_WORDS: [&str; 16] = [
    "i", "think", "that", "you", "know", "well", "so", "really", "it", "is", "about", "tell",
    "me", "what", "do", "like",
];

const PROMPTS: [&[&str]; 4] = [
    &["tell", "me", "about"],
    &["what", "about"],
    &["do", "you", "know"],
    &["so", "what", "is"],
];

const RESPONSE_OPENERS: [&[&str]; 3] = [&["well"], &["i", "think"], &["so", "it", "is"]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    /// Episodes marked `train`.
    pub episodes: usize,
    /// Additional episodes marked `test-seen`.
    pub test_episodes: usize,
    pub turns: usize,
    /// Pool size including the sentinel.
    pub pool_size: usize,
    /// Plausible facts per turn.
    pub multimodality: usize,
    /// Fraction of the response's content words copied from the gold fact.
    pub copy_rate: f64,
    /// Number of content words (keys and attributes).
    pub vocab_size: usize,
    pub facts_per_key: usize,
    pub fact_len: usize,
    pub history_dependent: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 5,
            episodes: 200,
            test_episodes: 50,
            turns: 4,
            pool_size: 10,
            multimodality: 1,
            copy_rate: 0.8,
            vocab_size: 300,
            facts_per_key: 3,
            fact_len: 5,
            history_dependent: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn keys(&self) -> usize {
        (self.vocab_size / 4).max(self.topics)
    }

    fn keys_per_topic(&self) -> usize {
        self.keys() / self.topics.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.turns == 0 || self.episodes + self.test_episodes == 0 {
            return Err(invalid!("topics, turns and episode count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.copy_rate) {
            return Err(invalid!("copy rate {} outside [0, 1]", self.copy_rate));
        }
        if self.multimodality == 0 || self.multimodality >= self.pool_size {
            return Err(invalid!(
                "multimodality {} must be in [1, {}] for a pool of {} (one slot is the sentinel)",
                self.multimodality,
                self.pool_size.saturating_sub(1),
                self.pool_size
            ));
        }
        if self.facts_per_key < self.multimodality {
            return Err(invalid!(
                "{} facts per key cannot supply {} plausible sentences",
                self.facts_per_key,
                self.multimodality
            ));
        }
        if self.fact_len < 2 {
            return Err(invalid!("facts need a key and at least one attribute"));
        }
        let attrs = self.vocab_size.saturating_sub(self.keys());
        if attrs < 2 * self.fact_len {
            return Err(invalid!("vocabulary of {} too small", self.vocab_size));
        }
        let distractors = self.pool_size - 1 - self.multimodality;
        let available = (self.keys_per_topic().saturating_sub(1)) * self.facts_per_key;
        if distractors > available {
            return Err(invalid!(
                "topic has {available} distractor facts, pool needs {distractors}"
            ));
        }
        Ok(())
    }
}

/// Pronounceable pseudo-word for content index `i`.
fn content_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syll = C.len() * V.len();
    let mut n = i;
    let mut w = String::new();
    for _ in 0..3 {
        let s = n % syll;
        n /= syll;
        w.push(C[s / V.len()] as char);
        w.push(V[s % V.len()] as char);
    }
    w
}

struct Inventory {
    /// facts[key] = list of fact sentences for that key.
    facts: Vec<Vec<Vec<String>>>,
    /// topic → key indices
    topics: Vec<Vec<usize>>,
    attrs: Vec<String>,
}

fn inventory(cfg: &SynthConfig, rng: &mut Rng) -> Inventory {
    let keys = cfg.keys();
    let words: Vec<String> = (0..cfg.vocab_size).map(content_word).collect();
    let (key_words, attrs) = words.split_at(keys);
    let facts = key_words
        .iter()
        .map(|k| {
            (0..cfg.facts_per_key)
                .map(|_| {
                    let mut s = vec![k.clone()];
                    for i in rng.sample_indices(attrs.len(), cfg.fact_len - 1) {
                        s.push(attrs[i].clone());
                    }
                    s
                })
                .collect()
        })
        .collect();
    let per = cfg.keys_per_topic();
    let topics = (0..cfg.topics)
        .map(|t| (t * per..(t + 1) * per).collect())
        .collect();
    Inventory {
        facts,
        topics,
        attrs: attrs.to_vec(),
    }
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

fn apprentice_utterance(key: &str, rng: &mut Rng) -> Vec<String> {
    let mut x = words(rng.choose(&PROMPTS));
    x.push(key.to_string());
    x
}

/// Response copying at least `copy_rate` of its content words from `gold`.
fn wizard_utterance(gold: &[String], cfg: &SynthConfig, inv: &Inventory, rng: &mut Rng) -> Vec<String> {
    let content_len = gold.len() - 1;
    let copied = (cfg.copy_rate * content_len as f64).ceil() as usize;
    let mut picks = rng.sample_indices(content_len, copied.min(content_len));
    picks.sort_unstable();
    let mut content: Vec<String> = picks.into_iter().map(|i| gold[i + 1].clone()).collect();
    while content.len() < content_len {
        let w = rng.choose(&inv.attrs);
        if !gold.contains(w) {
            content.push(w.clone());
        }
    }
    let mut y = words(rng.choose(&RESPONSE_OPENERS));
    y.extend(content);
    y
}

/// Generate a corpus; the same config always yields the same episodes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let inv = inventory(cfg, &mut rng);
    let total = cfg.episodes + cfg.test_episodes;
    let mut out = Vec::with_capacity(total);
    for e in 0..total {
        let split = if e < cfg.episodes {
            Split::Train
        } else {
            Split::TestSeen
        };
        let topic = rng.below(cfg.topics);
        out.push(episode(cfg, &inv, topic, split, &mut rng));
    }
    Ok(out)
}

/// Pool of `m` facts about `key` plus distractors about other topic keys.
/// Returns the pool and the pool indices of the plausible facts.
fn build_pool(
    cfg: &SynthConfig,
    inv: &Inventory,
    topic: usize,
    key: usize,
    rng: &mut Rng,
) -> (KnowledgePool, Vec<usize>) {
    let m = cfg.multimodality;
    let mut entries: Vec<(Vec<String>, bool)> = Vec::with_capacity(cfg.pool_size - 1);
    for i in rng.sample_indices(cfg.facts_per_key, m) {
        entries.push((inv.facts[key][i].clone(), true));
    }
    let others: Vec<(usize, usize)> = inv.topics[topic]
        .iter()
        .filter(|&&k| k != key)
        .flat_map(|&k| (0..cfg.facts_per_key).map(move |f| (k, f)))
        .collect();
    for i in rng.sample_indices(others.len(), cfg.pool_size - 1 - m) {
        let (k, f) = others[i];
        entries.push((inv.facts[k][f].clone(), false));
    }
    rng.shuffle(&mut entries);
    let plausible = entries
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| *p)
        .map(|(i, _)| i + 1)
        .collect();
    let pool = KnowledgePool::new(entries.into_iter().map(|(s, _)| s).collect());
    (pool, plausible)
}

fn episode(cfg: &SynthConfig, inv: &Inventory, topic: usize, split: Split, rng: &mut Rng) -> Episode {
    let keys = &inv.topics[topic];
    let mut turns = Vec::with_capacity(cfg.turns);
    if cfg.history_dependent {
        let key = *rng.choose(keys);
        let (pool, plausible) = build_pool(cfg, inv, topic, key, rng);
        let mut used: Vec<usize> = Vec::new();
        for _ in 0..cfg.turns {
            let mut remaining: Vec<usize> =
                plausible.iter().copied().filter(|p| !used.contains(p)).collect();
            if remaining.is_empty() {
                used.clear();
                remaining = plausible.clone();
            }
            let gold = *rng.choose(&remaining);
            used.push(gold);
            let x = apprentice_utterance(&inv.facts[key][0][0], rng);
            let y = wizard_utterance(pool.get(gold).unwrap(), cfg, inv, rng);
            turns.push(Turn::new(x, y, pool.clone(), Some(gold)));
        }
    } else {
        for _ in 0..cfg.turns {
            let key = *rng.choose(keys);
            let (pool, plausible) = build_pool(cfg, inv, topic, key, rng);
            let gold = *rng.choose(&plausible);
            let x = apprentice_utterance(&inv.facts[key][0][0], rng);
            let y = wizard_utterance(pool.get(gold).unwrap(), cfg, inv, rng);
            turns.push(Turn::new(x, y, pool, Some(gold)));
        }
    }
    Episode {
        topic: format!("topic{topic}"),
        split,
        turns,
    }
}

/// Pool index with the largest word overlap with `context`
/// (lowest index on ties, sentinel excluded unless the pool is empty).
pub fn nearest_by_overlap(context: &[String], pool: &KnowledgePool) -> usize {
    let mut best = (0, 0usize);
    for (i, s) in pool.sentences().iter().enumerate().skip(1) {
        let overlap = s.iter().filter(|w| context.contains(w)).count();
        if overlap > best.1 {
            best = (i, overlap);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            episodes: 20,
            test_episodes: 5,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(8)).unwrap());
        assert_eq!(a.iter().filter(|e| e.split == Split::TestSeen).count(), 5);
    }

    #[test]
    fn full_copy_rate_stays_inside_gold() {
        let cfg = SynthConfig {
            copy_rate: 1.0,
            ..small(1)
        };
        for ep in generate_synthetic(&cfg).unwrap() {
            for t in &ep.turns {
                let gold = t.pool.get(t.gold.unwrap()).unwrap();
                for w in t.wizard.iter().filter(|w| !FILLER_WORDS.contains(&w.as_str())) {
                    assert!(gold.contains(w), "{w} not in {gold:?}");
                }
            }
        }
    }

    #[test]
    fn copy_rate_and_multimodality_contracts() {
        let cfg = SynthConfig {
            multimodality: 3,
            copy_rate: 0.5,
            ..small(2)
        };
        for ep in generate_synthetic(&cfg).unwrap() {
            ep.validate().unwrap();
            for t in &ep.turns {
                assert_eq!(t.pool.len(), cfg.pool_size);
                let key = t.apprentice.last().unwrap();
                let plausible = t.pool.passages().iter().filter(|s| &s[0] == key).count();
                assert_eq!(plausible, 3);
                let gold = t.pool.get(t.gold.unwrap()).unwrap();
                assert_eq!(&gold[0], key);
                let content_len = gold.len() - 1;
                let copied = t.wizard.iter().filter(|w| gold[1..].contains(w)).count();
                assert!(copied as f64 >= cfg.copy_rate * content_len as f64);
            }
        }
    }

    #[test]
    fn single_plausible_fact_is_found_by_overlap() {
        for ep in generate_synthetic(&small(3)).unwrap() {
            for t in &ep.turns {
                assert_eq!(nearest_by_overlap(&t.apprentice, &t.pool), t.gold.unwrap());
            }
        }
    }

    #[test]
    fn history_dependent_golds_do_not_repeat() {
        let cfg = SynthConfig {
            multimodality: 3,
            turns: 3,
            history_dependent: true,
            ..small(4)
        };
        for ep in generate_synthetic(&cfg).unwrap() {
            let mut golds: Vec<usize> = ep.turns.iter().map(|t| t.gold.unwrap()).collect();
            golds.sort_unstable();
            golds.dedup();
            assert_eq!(golds.len(), 3);
            assert!(ep.turns.windows(2).all(|w| w[0].pool == w[1].pool));
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let over = SynthConfig {
            multimodality: 11,
            ..small(0)
        };
        assert!(generate_synthetic(&over).is_err());
        let bad_rate = SynthConfig {
            copy_rate: 1.5,
            ..small(0)
        };
        assert!(generate_synthetic(&bad_rate).is_err());
    }
}
