//! JSON-lines episode interchange.
//!
//! One episode per line:
//!
//! ```json
//! {"topic": "...", "split": "train", "turns": [
//!   {"x": "...", "y": "...", "pool": ["..."], "gold": 3, "refs": ["..."]}]}
//! ```
//!
//! Pools are listed without the sentinel; the loader inserts it at index 0
//! and shifts gold indices by one. `gold` may be an integer, `null`
//! (unlabeled), or the tag `"no_passages_used"` (sentinel). The Holl-E
//! flavour additionally accepts a list of integers when several consecutive
//! sentences are all correct.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{tokenize, Episode, KnowledgePool, Split, Turn, NO_PASSAGES_TAG};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Wizard-of-Wikipedia shaped records.
    WowJsonl,
    /// Holl-E shaped records (multi-gold, multi-reference).
    HolleJsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wow-jsonl" | "wow" => Ok(CorpusFormat::WowJsonl),
            "holle-jsonl" | "holle" => Ok(CorpusFormat::HolleJsonl),
            other => Err(Error::InvalidInput(format!("unknown corpus format `{other}`"))),
        }
    }
}

pub fn load_episodes(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Episode>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(&text, format)
}

pub fn parse_episodes(text: &str, format: CorpusFormat) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1, format)?);
    }
    Ok(out)
}

fn perr(line: usize, field: &str, detail: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn parse_line(line: &str, n: usize, format: CorpusFormat) -> Result<Episode> {
    let v: Value = serde_json::from_str(line).map_err(|e| perr(n, "<record>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| perr(n, "<record>", "expected a JSON object"))?;
    let topic = obj
        .get("topic")
        .and_then(Value::as_str)
        .ok_or_else(|| perr(n, "topic", "missing or not a string"))?
        .to_string();
    let split_s = obj
        .get("split")
        .and_then(Value::as_str)
        .ok_or_else(|| perr(n, "split", "missing or not a string"))?;
    let split = Split::parse(split_s).ok_or_else(|| perr(n, "split", format!("unknown split `{split_s}`")))?;
    let turns_v = obj
        .get("turns")
        .and_then(Value::as_array)
        .ok_or_else(|| perr(n, "turns", "missing or not an array"))?;
    if turns_v.is_empty() {
        return Err(perr(n, "turns", "episode has no turns"));
    }
    let mut turns = Vec::with_capacity(turns_v.len());
    for (ti, tv) in turns_v.iter().enumerate() {
        let f = |name: &str| format!("turns[{ti}].{name}");
        let t = tv
            .as_object()
            .ok_or_else(|| perr(n, &format!("turns[{ti}]"), "expected an object"))?;
        let text_field = |name: &str, required: bool| -> Result<String> {
            match t.get(name) {
                Some(Value::String(s)) => Ok(s.clone()),
                None if !required => Ok(String::new()),
                None => Err(perr(n, &f(name), "missing")),
                Some(_) => Err(perr(n, &f(name), "not a string")),
            }
        };
        // Wizard-first episodes carry an empty apprentice turn.
        let x = text_field("x", format == CorpusFormat::HolleJsonl)?;
        let y = text_field("y", true)?;
        let pool_v = t
            .get("pool")
            .and_then(Value::as_array)
            .ok_or_else(|| perr(n, &f("pool"), "missing or not an array"))?;
        let mut sentences = Vec::with_capacity(pool_v.len());
        for (pi, s) in pool_v.iter().enumerate() {
            let s = s
                .as_str()
                .ok_or_else(|| perr(n, &format!("turns[{ti}].pool[{pi}]"), "not a string"))?;
            sentences.push(tokenize(s));
        }
        let pool = KnowledgePool::new(sentences);
        let golds = parse_gold(t.get("gold"), pool.len(), format)
            .map_err(|d| perr(n, &f("gold"), d))?;
        let wizard = tokenize(&y);
        let mut references = vec![wizard.clone()];
        if let Some(refs) = t.get("refs") {
            let refs = refs
                .as_array()
                .ok_or_else(|| perr(n, &f("refs"), "not an array"))?;
            for (ri, r) in refs.iter().enumerate() {
                let r = r
                    .as_str()
                    .ok_or_else(|| perr(n, &format!("turns[{ti}].refs[{ri}]"), "not a string"))?;
                let toks = tokenize(r);
                if !references.contains(&toks) {
                    references.push(toks);
                }
            }
        }
        let mut golds = golds.into_iter();
        turns.push(Turn {
            apprentice: tokenize(&x),
            wizard,
            pool,
            gold: golds.next(),
            alt_golds: golds.collect(),
            references,
        });
    }
    let ep = Episode {
        topic,
        split,
        turns,
    };
    ep.validate().map_err(|e| perr(n, "turns", e.to_string()))?;
    Ok(ep)
}

/// Gold indices shifted past the sentinel.
fn parse_gold(v: Option<&Value>, pool_len: usize, format: CorpusFormat) -> Result<Vec<usize>, String> {
    let shift = |i: &Value| -> Result<usize, String> {
        let raw = i
            .as_u64()
            .ok_or_else(|| format!("expected a non-negative integer, got {i}"))? as usize;
        let idx = raw + 1;
        if idx >= pool_len {
            return Err(format!(
                "gold index {raw} out of range for a pool of {} sentences",
                pool_len - 1
            ));
        }
        Ok(idx)
    };
    match v {
        None | Some(Value::Null) => Ok(vec![]),
        Some(Value::String(s)) if s == NO_PASSAGES_TAG => Ok(vec![0]),
        Some(Value::String(s)) => Err(format!("unknown gold tag `{s}`")),
        Some(Value::Array(items)) if format == CorpusFormat::HolleJsonl => {
            if items.is_empty() {
                return Err("empty gold list".into());
            }
            items.iter().map(shift).collect()
        }
        Some(Value::Array(_)) => Err("gold lists are only accepted in holle-jsonl".into()),
        Some(other) => shift(other).map(|i| vec![i]),
    }
}

fn gold_json(g: usize) -> Value {
    if g == 0 {
        json!(NO_PASSAGES_TAG)
    } else {
        json!(g - 1)
    }
}

/// Serialize one episode to its interchange line.
pub fn episode_to_json(ep: &Episode) -> Value {
    let turns: Vec<Value> = ep
        .turns
        .iter()
        .map(|t| {
            let gold = match (t.gold, t.alt_golds.is_empty()) {
                (None, _) => Value::Null,
                (Some(g), true) => gold_json(g),
                (Some(_), false) => Value::Array(
                    t.gold_set()
                        .into_iter()
                        .map(|g| json!(g.saturating_sub(1)))
                        .collect(),
                ),
            };
            json!({
                "x": t.apprentice.join(" "),
                "y": t.wizard.join(" "),
                "pool": t.pool.passages().iter().map(|s| s.join(" ")).collect::<Vec<_>>(),
                "gold": gold,
                "refs": t.references.iter().map(|r| r.join(" ")).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({"topic": ep.topic, "split": ep.split.as_str(), "turns": turns})
}

pub fn write_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, &episode_to_json(ep))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"topic":"cats","split":"train","turns":[{"x":"Do you like cats?","y":"Cats are small carnivores.","pool":["Cats are small carnivores.","Dogs bark."],"gold":0,"refs":["Cats are small carnivores."]},{"x":"ok","y":"sure","pool":["A b."],"gold":"no_passages_used"},{"x":"hm","y":"yes","pool":["A b."],"gold":null}]}"#;

    #[test]
    fn parses_and_shifts_gold() {
        let eps = parse_episodes(LINE, CorpusFormat::WowJsonl).unwrap();
        assert_eq!(eps.len(), 1);
        let t = &eps[0].turns;
        assert_eq!(t[0].gold, Some(1));
        assert_eq!(t[0].pool.len(), 3);
        assert_eq!(t[1].gold, Some(0));
        assert_eq!(t[2].gold, None);
        assert_eq!(t[0].references.len(), 1);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let text = format!("{LINE}\n{}", &LINE[..40]);
        let err = parse_episodes(&text, CorpusFormat::WowJsonl).unwrap_err();
        assert!(err.to_string().contains("parse failure at line 2"), "{err}");
    }

    #[test]
    fn out_of_range_gold_is_an_error() {
        let bad = LINE.replace(r#""gold":0"#, r#""gold":5"#);
        let err = parse_episodes(&bad, CorpusFormat::WowJsonl).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("turns[0].gold"), "{msg}");
    }

    #[test]
    fn missing_field_is_named() {
        let bad = LINE.replacen(r#""y":"Cats are small carnivores.","#, "", 1);
        let err = parse_episodes(&bad, CorpusFormat::WowJsonl).unwrap_err();
        assert!(err.to_string().contains("turns[0].y"), "{err}");
    }

    #[test]
    fn holle_multi_gold_and_refs() {
        let line = r#"{"topic":"film","split":"test","turns":[{"x":"hi","y":"great film","pool":["s one","s two","s three"],"gold":[1,2],"refs":["great film","loved it"]}]}"#;
        let eps = parse_episodes(line, CorpusFormat::HolleJsonl).unwrap();
        let t = &eps[0].turns[0];
        assert_eq!(t.gold, Some(2));
        assert_eq!(t.alt_golds, vec![3]);
        assert_eq!(t.references.len(), 2);
        assert!(parse_episodes(line, CorpusFormat::WowJsonl).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let eps = parse_episodes(LINE, CorpusFormat::WowJsonl).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_episodes(&p, &eps).unwrap();
        let back = load_episodes(&p, CorpusFormat::WowJsonl).unwrap();
        assert_eq!(back, eps);
    }
}
