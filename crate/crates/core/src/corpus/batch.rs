//! Id-encoded episodes and padded dialogue batches.
//!
//! Batches group whole dialogues. Turn rows are laid out episode-major and
//! padded to the longest dialogue in the batch; pools are padded to the
//! largest pool; token sequences are padded with `PAD` and carry explicit
//! lengths.

use super::{Episode, TokenId, Vocab, PAD};
use crate::nn::Rng;

/// One turn with every utterance mapped to vocabulary ids. `y` carries no
/// BOS/EOS; the decoder adds them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTurn {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub pool: Vec<Vec<TokenId>>,
    pub gold: Option<usize>,
    pub alt_golds: Vec<usize>,
    pub references: Vec<Vec<String>>,
}

impl EncodedTurn {
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

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedEpisode {
    pub topic: String,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedEpisode {
    pub fn encode(ep: &Episode, vocab: &Vocab) -> EncodedEpisode {
        let turns = ep
            .turns
            .iter()
            .map(|t| EncodedTurn {
                x: vocab.encode(&t.apprentice),
                y: vocab.encode(&t.wizard),
                pool: t.pool.sentences().iter().map(|s| vocab.encode(s)).collect(),
                gold: t.gold,
                alt_golds: t.alt_golds.clone(),
                references: t.references.clone(),
            })
            .collect();
        EncodedEpisode {
            topic: ep.topic.clone(),
            turns,
        }
    }

    pub fn encode_all(eps: &[Episode], vocab: &Vocab) -> Vec<EncodedEpisode> {
        eps.iter().map(|e| Self::encode(e, vocab)).collect()
    }

    /// Number of non-pad tokens across utterances and pools.
    pub fn token_count(&self) -> usize {
        self.turns
            .iter()
            .map(|t| t.x.len() + t.y.len() + t.pool.iter().map(Vec::len).sum::<usize>())
            .sum()
    }
}

/// Row-major `rows × width` id matrix with per-row lengths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PaddedSeqs {
    pub ids: Vec<TokenId>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl PaddedSeqs {
    pub fn from_seqs<S: AsRef<[TokenId]>>(seqs: &[S]) -> PaddedSeqs {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * width];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (r, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            ids[r * width..r * width + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        PaddedSeqs {
            ids,
            lengths,
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Unpadded content of row `r`.
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.width..r * self.width + self.lengths[r]]
    }

    pub fn is_real(&self, r: usize, c: usize) -> bool {
        c < self.lengths[r]
    }

    /// `rows × width` validity mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.ids.len());
        for &len in &self.lengths {
            m.extend((0..self.width).map(|c| c < len));
        }
        m
    }
}

/// A group of dialogues in padded form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the episodes in the input slice.
    pub episode_indices: Vec<usize>,
    pub topics: Vec<String>,
    pub max_turns: usize,
    pub max_pool: usize,
    /// `episodes × max_turns`; false for padding turns.
    pub turn_mask: Vec<bool>,
    /// One row per (episode, turn) slot.
    pub x: PaddedSeqs,
    pub y: PaddedSeqs,
    /// One row per (episode, turn, pool slot).
    pub pool: PaddedSeqs,
    /// `episodes × max_turns × max_pool`; false for padding sentences.
    pub pool_mask: Vec<bool>,
    /// Gold index per turn slot (0 where unlabeled or padding).
    pub gold: Vec<usize>,
    /// True where the turn slot carries a gold label.
    pub labeled: Vec<bool>,
    pub alt_golds: Vec<Vec<usize>>,
    pub references: Vec<Vec<Vec<String>>>,
}

impl Batch {
    pub fn from_episodes(eps: &[&EncodedEpisode], indices: Vec<usize>) -> Batch {
        let max_turns = eps.iter().map(|e| e.turns.len()).max().unwrap_or(0);
        let max_pool = eps
            .iter()
            .flat_map(|e| e.turns.iter().map(|t| t.pool.len()))
            .max()
            .unwrap_or(0);
        let slots = eps.len() * max_turns;
        let empty: &[TokenId] = &[];
        let mut xs = Vec::with_capacity(slots);
        let mut ys = Vec::with_capacity(slots);
        let mut pools = Vec::with_capacity(slots * max_pool);
        let mut turn_mask = Vec::with_capacity(slots);
        let mut pool_mask = Vec::with_capacity(slots * max_pool);
        let mut gold = Vec::with_capacity(slots);
        let mut labeled = Vec::with_capacity(slots);
        let mut alt_golds = Vec::with_capacity(slots);
        let mut references = Vec::with_capacity(slots);
        for e in eps {
            for t in 0..max_turns {
                let turn = e.turns.get(t);
                turn_mask.push(turn.is_some());
                xs.push(turn.map_or(empty, |t| &t.x));
                ys.push(turn.map_or(empty, |t| &t.y));
                for l in 0..max_pool {
                    let s = turn.and_then(|t| t.pool.get(l));
                    pool_mask.push(s.is_some());
                    pools.push(s.map_or(empty, |s| s.as_slice()));
                }
                gold.push(turn.and_then(|t| t.gold).unwrap_or(0));
                labeled.push(turn.is_some_and(|t| t.gold.is_some()));
                alt_golds.push(turn.map(|t| t.alt_golds.clone()).unwrap_or_default());
                references.push(turn.map(|t| t.references.clone()).unwrap_or_default());
            }
        }
        Batch {
            episode_indices: indices,
            topics: eps.iter().map(|e| e.topic.clone()).collect(),
            max_turns,
            max_pool,
            turn_mask,
            x: PaddedSeqs::from_seqs(&xs),
            y: PaddedSeqs::from_seqs(&ys),
            pool: PaddedSeqs::from_seqs(&pools),
            pool_mask,
            gold,
            labeled,
            alt_golds,
            references,
        }
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    /// Recover the encoded episodes from the padded arrays.
    pub fn unbatch(&self) -> Vec<EncodedEpisode> {
        let mut out = Vec::with_capacity(self.len());
        for (e, topic) in self.topics.iter().enumerate() {
            let mut turns = Vec::new();
            for t in 0..self.max_turns {
                let slot = e * self.max_turns + t;
                if !self.turn_mask[slot] {
                    continue;
                }
                let pool = (0..self.max_pool)
                    .filter(|&l| self.pool_mask[slot * self.max_pool + l])
                    .map(|l| self.pool.row(slot * self.max_pool + l).to_vec())
                    .collect();
                turns.push(EncodedTurn {
                    x: self.x.row(slot).to_vec(),
                    y: self.y.row(slot).to_vec(),
                    pool,
                    gold: self.labeled[slot].then_some(self.gold[slot]),
                    alt_golds: self.alt_golds[slot].clone(),
                    references: self.references[slot].clone(),
                });
            }
            out.push(EncodedEpisode {
                topic: topic.clone(),
                turns,
            });
        }
        out
    }
}

/// Shuffle dialogues with `seed` and group them `batch_size` at a time
/// (a size of 0 is treated as 1).
pub fn make_batches(episodes: &[EncodedEpisode], batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let eps: Vec<&EncodedEpisode> = chunk.iter().map(|&i| &episodes[i]).collect();
            Batch::from_episodes(&eps, chunk.to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_synthetic, SynthConfig};

    fn corpus() -> Vec<EncodedEpisode> {
        let mut eps = generate_synthetic(&SynthConfig {
            episodes: 12,
            test_episodes: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        eps[3].turns.truncate(2);
        eps[5].turns[1].gold = None;
        let vocab = build_vocab(&eps, 1000, 1).unwrap();
        EncodedEpisode::encode_all(&eps, &vocab)
    }

    #[test]
    fn unbatch_round_trips() {
        let eps = corpus();
        for bs in [1, 3, 5, 12] {
            let batches = make_batches(&eps, bs, 11);
            let mut seen = 0;
            for b in &batches {
                for (i, e) in b.episode_indices.iter().zip(b.unbatch()) {
                    assert_eq!(eps[*i], e);
                    seen += 1;
                }
            }
            assert_eq!(seen, eps.len());
        }
    }

    #[test]
    fn single_episode_batches_have_no_cross_padding() {
        let eps = corpus();
        for b in make_batches(&eps, 1, 0) {
            let e = &eps[b.episode_indices[0]];
            assert_eq!(b.max_turns, e.turns.len());
            assert!(b.turn_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn token_counts_preserved_and_pads_masked() {
        let eps = corpus();
        let expected: usize = eps.iter().map(EncodedEpisode::token_count).sum();
        let mut counted = 0;
        for b in make_batches(&eps, 4, 2) {
            for seqs in [&b.x, &b.y, &b.pool] {
                let mask = seqs.mask();
                counted += mask.iter().filter(|&&m| m).count();
                for (id, m) in seqs.ids.iter().zip(&mask) {
                    if !m {
                        assert_eq!(*id, PAD);
                    }
                }
            }
        }
        assert_eq!(counted, expected);
    }

    #[test]
    fn shuffling_is_seeded() {
        let eps = corpus();
        let a: Vec<_> = make_batches(&eps, 3, 5).into_iter().map(|b| b.episode_indices).collect();
        let b: Vec<_> = make_batches(&eps, 3, 5).into_iter().map(|b| b.episode_indices).collect();
        let c: Vec<_> = make_batches(&eps, 3, 6).into_iter().map(|b| b.episode_indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
