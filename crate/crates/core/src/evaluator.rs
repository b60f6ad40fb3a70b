//! Response and knowledge-selection metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedEpisode, Vocab};
use crate::error::{invalid, Result};
use crate::model::{infer_episode, InferenceOptions, SktModel};
use crate::nn::Scalar;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Number of per-turn accuracy buckets; the last one collects turns ≥ 5.
pub const TURN_BUCKETS: usize = 5;

/// Drop punctuation tokens (no alphanumeric character) and articles.
pub fn normalize_text<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| t.chars().any(char::is_alphanumeric) && !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

fn bag<T: std::hash::Hash + Eq>(items: impl Iterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

fn bag_f1<T: std::hash::Hash + Eq>(pred: &HashMap<T, usize>, gold: &HashMap<T, usize>) -> f64 {
    let np: usize = pred.values().sum();
    let ng: usize = gold.values().sum();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let overlap: usize = pred
        .iter()
        .map(|(k, &c)| c.min(gold.get(k).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / np as f64;
    let r = overlap as f64 / ng as f64;
    2.0 * p * r / (p + r)
}

fn best_over_refs<S: AsRef<str>, R: AsRef<[S]>>(
    pred: &[S],
    refs: &[R],
    n: usize,
) -> f64 {
    let grams = |toks: &[String]| -> HashMap<Vec<String>, usize> {
        bag(toks.windows(n).map(|w| w.to_vec()))
    };
    let p = grams(&normalize_text(pred));
    refs.iter()
        .map(|r| bag_f1(&p, &grams(&normalize_text(r.as_ref()))))
        .fold(0.0, f64::max)
}

/// Bag-of-unigrams F1 after normalization, best over the references.
pub fn unigram_f1<S: AsRef<str>, R: AsRef<[S]>>(pred: &[S], refs: &[R]) -> f64 {
    best_over_refs(pred, refs, 1)
}

/// Bag-of-bigrams F1 after normalization, best over the references.
pub fn bigram_f1<S: AsRef<str>, R: AsRef<[S]>>(pred: &[S], refs: &[R]) -> f64 {
    best_over_refs(pred, refs, 2)
}

/// `exp(nll_sum / tokens)`.
pub fn perplexity_from(nll_sum: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(invalid!("no tokens to evaluate"));
    }
    Ok((nll_sum / tokens as f64).exp())
}

/// One scored knowledge prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// 1-based turn index within its dialogue.
    pub turn: usize,
    pub predicted: usize,
    pub golds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Accuracy for turns 1, 2, 3, 4 and 5+; `None` for empty buckets.
    pub per_turn: Vec<Option<f64>>,
    pub per_turn_counts: Vec<usize>,
    pub labeled_turns: usize,
}

/// Fraction of labeled turns whose prediction matches any gold index.
pub fn accuracy_from(outcomes: &[SelectionOutcome]) -> Result<AccuracyReport> {
    let mut correct = [0usize; TURN_BUCKETS];
    let mut counts = [0usize; TURN_BUCKETS];
    for o in outcomes.iter().filter(|o| !o.golds.is_empty()) {
        let b = o.turn.clamp(1, TURN_BUCKETS) - 1;
        counts[b] += 1;
        if o.golds.contains(&o.predicted) {
            correct[b] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(invalid!("no labeled turns to score"));
    }
    Ok(AccuracyReport {
        overall: correct.iter().sum::<usize>() as f64 / n as f64,
        per_turn: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &k)| (k > 0).then(|| c as f64 / k as f64))
            .collect(),
        per_turn_counts: counts.to_vec(),
        labeled_turns: n,
    })
}

/// Prior-argmax knowledge accuracy over `episodes`.
pub fn selection_accuracy<F: Scalar>(
    model: &SktModel<F>,
    episodes: &[EncodedEpisode],
    opts: &InferenceOptions,
) -> Result<AccuracyReport> {
    let opts = InferenceOptions {
        generate: false,
        ..*opts
    };
    let mut outcomes = Vec::new();
    for ep in episodes {
        for (i, (turn, inf)) in ep.turns.iter().zip(infer_episode(model, ep, &opts)?).enumerate() {
            outcomes.push(SelectionOutcome {
                turn: i + 1,
                predicted: inf.selected,
                golds: turn.gold_set(),
            });
        }
    }
    accuracy_from(&outcomes)
}

/// Teacher-forced perplexity of the gold responses.
pub fn perplexity<F: Scalar>(
    model: &SktModel<F>,
    episodes: &[EncodedEpisode],
    opts: &InferenceOptions,
) -> Result<f64> {
    let opts = InferenceOptions {
        generate: false,
        ..*opts
    };
    let mut nll = 0.0;
    let mut tokens = 0;
    for ep in episodes {
        for t in infer_episode(model, ep, &opts)? {
            nll += t.nll;
            tokens += t.tokens;
        }
    }
    perplexity_from(nll, tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub ppl: f64,
    /// Unigram F1 in [0, 1].
    pub r1: f64,
    /// Bigram F1 in [0, 1].
    pub r2: f64,
    /// Knowledge accuracy in [0, 1]; `None` when no turn is labeled.
    pub accuracy: Option<f64>,
    pub per_turn_accuracy: Vec<Option<f64>>,
    pub samples: usize,
    pub labeled_turns: usize,
}

impl EvalReport {
    /// Aligned `key  value` lines; scores in percent.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k:<16}{v}");
        };
        row("split", self.split.clone());
        row("samples", self.samples.to_string());
        row("labeled_turns", self.labeled_turns.to_string());
        row("ppl", format!("{:.4}", self.ppl));
        row("r1", pct(Some(self.r1)));
        row("r2", pct(Some(self.r2)));
        row("accuracy", pct(self.accuracy));
        for (i, a) in self.per_turn_accuracy.iter().enumerate() {
            let key = if i + 1 == TURN_BUCKETS {
                format!("acc_turn_{}+", i + 1)
            } else {
                format!("acc_turn_{}", i + 1)
            };
            row(&key, pct(*a));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Perplexity, F1 of greedy responses and knowledge accuracy over a split.
pub fn evaluate_split<F: Scalar>(
    model: &SktModel<F>,
    vocab: &Vocab,
    episodes: &[EncodedEpisode],
    split: &str,
    opts: &InferenceOptions,
) -> Result<EvalReport> {
    let opts = InferenceOptions {
        generate: true,
        ..*opts
    };
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut samples = 0;
    let mut outcomes = Vec::new();
    for ep in episodes {
        for (i, (turn, inf)) in ep.turns.iter().zip(infer_episode(model, ep, &opts)?).enumerate() {
            nll += inf.nll;
            tokens += inf.tokens;
            let pred = vocab.decode(&inf.generation.as_ref().expect("generation requested").tokens);
            let refs: Vec<Vec<String>> = if turn.references.is_empty() {
                vec![vocab.decode(&turn.y)]
            } else {
                turn.references.clone()
            };
            r1 += unigram_f1(&pred, &refs);
            r2 += bigram_f1(&pred, &refs);
            samples += 1;
            outcomes.push(SelectionOutcome {
                turn: i + 1,
                predicted: inf.selected,
                golds: turn.gold_set(),
            });
        }
    }
    let acc = accuracy_from(&outcomes).ok();
    Ok(EvalReport {
        split: split.to_string(),
        ppl: perplexity_from(nll, tokens)?,
        r1: r1 / samples as f64,
        r2: r2 / samples as f64,
        accuracy: acc.as_ref().map(|a| a.overall),
        per_turn_accuracy: acc
            .as_ref()
            .map_or(vec![None; TURN_BUCKETS], |a| a.per_turn.clone()),
        samples,
        labeled_turns: acc.map_or(0, |a| a.labeled_turns),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text(&["the", "cat", ",", "sat"]), vec!["cat", "sat"]);
        assert!(normalize_text::<&str>(&[]).is_empty());
        let once = normalize_text(&t("An apple, the pear... a fig!"));
        assert_eq!(once, vec!["apple", "pear", "fig"]);
        assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(unigram_f1(&t("the cat sat"), &[t("cat sat down")]), 0.8);
        assert_eq!(bigram_f1(&t("x b c"), &[t("b c d")]), 0.5);
        // "a" is an article, so only "b c" survives normalization.
        assert!((bigram_f1(&t("a b c"), &[t("b c d")]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(unigram_f1(&t("x y"), &[t("x y")]), 1.0);
        assert_eq!(unigram_f1(&t("x y"), &[t("q"), t("x y")]), 1.0);
        assert_eq!(bigram_f1(&t("x"), &[t("x y")]), 0.0);
        assert_eq!(unigram_f1(&t("the ."), &[t("a")]), 1.0);
        assert_eq!(unigram_f1(&t(""), &[t("word")]), 0.0);
    }

    #[test]
    fn accuracy_rules() {
        let o = |turn, predicted, golds: &[usize]| SelectionOutcome {
            turn,
            predicted,
            golds: golds.to_vec(),
        };
        let r = accuracy_from(&[o(1, 7, &[3, 7]), o(2, 1, &[2]), o(6, 0, &[0]), o(3, 4, &[])]).unwrap();
        assert_eq!(r.labeled_turns, 3);
        assert!((r.overall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_turn, vec![Some(1.0), Some(0.0), None, None, Some(1.0)]);
        assert!(accuracy_from(&[o(1, 0, &[])]).is_err());
    }

    #[test]
    fn perplexity_rules() {
        assert!((perplexity_from(3.0 * 20f64.ln(), 3).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(perplexity_from(0.0, 4).unwrap(), 1.0);
        assert!(perplexity_from(0.0, 0).is_err());
    }
}
