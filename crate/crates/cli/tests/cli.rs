use std::path::Path;

use skt_cli::{chat, run_cli, ChatArgs};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("skt").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const TINY: &str = "
[synth]
episodes = 8
test_episodes = 4
vocab_size = 120
topics = 2
turns = 3
pool_size = 5

[model]
d_model = 8
decoder_layers = 1
decoder_heads = 2

[train]
epochs = 1
batch_size = 4
";

fn tiny_setup(dir: &Path) -> (String, String, String) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data.jsonl");
    let ckpt = dir.join("model.skt");
    let (c, _, e) = run(&["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(c, 0, "{e}");
    let (c, out, e) = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(c, 0, "{e}");
    assert!(out.contains("epoch   1"), "{out}");
    (
        cfg.to_string_lossy().into_owned(),
        data.to_string_lossy().into_owned(),
        ckpt.to_string_lossy().into_owned(),
    )
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let (code, _, err) = run(&["synth", "--episodes", "100", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_2_and_failures_exit_1() {
    let (code, _, err) = run(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = run(&["frobnicate"]);
    assert_eq!(code, 2);
    let (code, _, err) = run(&["train", "--data", "x.jsonl", "--ckpt", "y", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(code, 1);
    assert!(err.contains("cfg.toml"), "{err}");
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("serve"));
}

#[test]
fn train_eval_prepare_and_chat() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = tiny_setup(dir.path());

    let (code, table, err) = run(&["eval", "--ckpt", &ckpt, "--data", &data, "--split", "test-seen", "--max-len", "6"]);
    assert_eq!(code, 0, "{err}");
    for key in ["ppl", "r1", "r2", "accuracy", "samples"] {
        assert!(table.lines().any(|l| l.starts_with(key)), "missing {key}: {table}");
    }
    let (code, json, _) = run(&["eval", "--ckpt", &ckpt, "--data", &data, "--json", "--split", "test-seen", "--max-len", "6"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["samples"], 12);

    let out = dir.path().join("prepared.jsonl");
    let (code, report, err) = run(&["prepare", "--data", &data, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(report.contains("train") && report.contains("episodes       8"), "{report}");
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&out).unwrap());

    let args = ChatArgs {
        ckpt: ckpt.into(),
        data: Some(data.into()),
        topic: None,
        pool: None,
        max_len: 6,
        seed: None,
    };
    let mut input = std::io::Cursor::new("hello there\n\nwhat else\n:quit\nignored\n");
    let mut out = Vec::new();
    chat(&args, &mut input, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.matches("wizard:").count(), 2, "{text}");
    assert!(text.contains("[0] no passages used"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = tiny_setup(dir.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let (code, _, err) = run(&["eval", "--ckpt", &ckpt, "--data", &data]);
    assert_eq!(code, 1);
    assert!(err.contains("corrupt checkpoint"), "{err}");
}
