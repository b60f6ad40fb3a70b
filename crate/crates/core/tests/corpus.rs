use std::io::Write;

use proptest::prelude::*;
use skt_core::corpus::{
    build_vocab, generate_synthetic, load_episodes, make_batches, write_episodes, CorpusFormat, EncodedEpisode,
    Split, SynthConfig,
};

#[test]
fn wow_shaped_train_file_reports_every_dialogue() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    for i in 0..18430 {
        // Alternate wizard-first and apprentice-first openings.
        let first_x = if i % 2 == 0 { "" } else { "\"x\": \"hi there\", " };
        writeln!(
            f,
            r#"{{"topic": "topic {}", "split": "train", "turns": [{{{first_x}"y": "cats purr .", "pool": ["cats purr loudly .", "dogs bark ."], "gold": 0}}, {{"x": "why ?", "y": "no idea", "pool": ["fish swim ."], "gold": "no_passages_used"}}]}}"#,
            i % 300
        )
        .unwrap();
    }
    drop(f);
    let eps = load_episodes(&path, CorpusFormat::WowJsonl).unwrap();
    assert_eq!(eps.len(), 18430);
    assert!(eps.iter().all(|e| e.split == Split::Train && e.turns.len() == 2));
    assert_eq!(eps[0].turns[0].gold, Some(1));
    assert_eq!(eps[0].turns[1].gold, Some(0));
    assert!(eps[0].turns[0].apprentice.is_empty());
}

#[test]
fn malformed_line_reports_its_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"topic\": \"a\", \"split\": \"train\", \"turns\": [{\"x\": \"q\", \"y\": \"r\", \"pool\": [\"s\"], \"gold\": 0}]}\n\
         {\"topic\": \"b\", \"split\": \"train\", \"turns\": [{\"x\": \"q\", \"y\": \"r\", \"pool\": [\"s\"], \"gold\": 5}]}\n",
    )
    .unwrap();
    let err = load_episodes(&path, CorpusFormat::WowJsonl).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("gold"), "{err}");
}

#[test]
fn synthetic_corpus_survives_a_file_round_trip() {
    let eps = generate_synthetic(&SynthConfig {
        episodes: 12,
        test_episodes: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.jsonl");
    write_episodes(&path, &eps).unwrap();
    assert_eq!(load_episodes(&path, CorpusFormat::WowJsonl).unwrap(), eps);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batching_covers_each_episode_once(
        seed in any::<u64>(),
        n in 1usize..20,
        batch_size in 1usize..7,
        turns in 1usize..5,
    ) {
        let eps = generate_synthetic(&SynthConfig {
            episodes: n,
            test_episodes: 0,
            turns,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let vocab = build_vocab(&eps, 1000, 1).unwrap();
        let encoded = EncodedEpisode::encode_all(&eps, &vocab);
        let batches = make_batches(&encoded, batch_size, seed);
        let mut seen = vec![0usize; n];
        for b in &batches {
            prop_assert!(b.len() <= batch_size);
            for (i, e) in b.episode_indices.iter().zip(b.unbatch()) {
                seen[*i] += 1;
                prop_assert_eq!(&e, &encoded[*i]);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}
