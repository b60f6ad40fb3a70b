"""Smoke test for the `skt` extension module.

Build first with `cargo build -p skt-python --release` (or `maturin develop`
from crates/python). The script loads the module from the cargo target
directory when it is not installed.
"""

import importlib.machinery
import importlib.util
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_skt():
    try:
        import skt  # noqa: F401

        return skt
    except ImportError:
        pass
    for profile in ("release", "debug"):
        path = os.path.join(ROOT, "target", profile, "libskt.so")
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("skt", path)
            spec = importlib.util.spec_from_file_location("skt", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["skt"] = module
            return module
    sys.exit("skt extension not found; run `cargo build -p skt-python --release`")


def main():
    skt = load_skt()
    assert skt.tokenize("Hello, world!") == ["hello", ",", "world", "!"]
    assert skt.normalize_text(["the", "cat", ",", "sat"]) == ["cat", "sat"]
    assert abs(skt.unigram_f1("the cat sat", ["cat sat down"]) - 0.8) < 1e-12

    config = """
[synth]
episodes = 12
test_episodes = 4
vocab_size = 120
topics = 2
turns = 3
pool_size = 5

[model]
d_model = 16
decoder_layers = 1
decoder_heads = 2

[train]
epochs = 1
batch_size = 4
"""
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "synth.jsonl")
        assert skt.synthesize(data, config) == 16
        model = skt.Model.train(data, config)
        assert model.d_model == 16 and model.num_parameters() > 0

        report = model.evaluate(data, split="test-seen", max_len=8)
        assert report["samples"] == 12 and 0.0 <= report["accuracy"] <= 1.0

        ckpt = os.path.join(tmp, "model.skt")
        model.save(ckpt)
        again = skt.Model.load(ckpt)
        assert again.evaluate(data, split="test-seen", max_len=8) == report

        chat = model.chat(["cats purr loudly", "dogs bark at night"], max_len=8)
        assert chat.pool[0] == "no passages used"
        reply = chat.send("tell me about cats")
        assert abs(sum(reply["prior"]) - 1.0) < 1e-6
        assert reply["knowledge_index"] == max(
            range(len(reply["prior"])), key=reply["prior"].__getitem__
        )
        assert len(chat.transcript()) == 1
    print("skt smoke test passed")


if __name__ == "__main__":
    main()
