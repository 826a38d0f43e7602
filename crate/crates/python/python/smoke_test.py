"""Smoke test for the dyntok_py extension.

Build and run from the workspace root:

    cargo build --release -p dyntok-python
    cp target/release/libdyntok_py.so crates/python/python/dyntok_py.so
    python3 crates/python/python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dyntok_py as dt  # noqa: E402

TINY = """
seed = 3
[corpus]
n_utts = 24
symbols = 4
n_mels = 8
symbols_per_utt = [2, 4]
[encoder]
n_layers = 1
hidden_dim = 8
[merge]
ratio = 4.0
predictor_channels = 4
[attention]
layers = 1
heads = 2
width = 8
[recon]
n_blocks = 1
channels = 4
[optim]
epochs = 1
warmup_steps = 2
max_frames_per_batch = 400
"""


def main():
    assert dt.target_length(80, 8.0) == 10
    assert dt.target_length(3, 8.0) == 1
    assert dt.upsample_indices([0.5, 1.0, 1.5, 2.0], 2) == [0, 0, 1, 1]
    assert dt.id_to_digits(dt.digits_to_id([1, 2, 3, 0, 0, 0, 3])) == [1, 2, 3, 0, 0, 0, 3]
    assert dt.cer([1, 2, 3, 4], [1, 2, 4]) == 0.25
    m = dt.mel_metrics([[1.0], [3.0]], [[0.0], [2.0]])
    assert abs(m["mel_mae"] - 1.0) < 1e-12 and m["delta_mae"] == 0.0

    try:
        dt.id_to_digits(4 ** 7)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range id accepted")

    cfg = dt.RunConfig(TINY)
    utts = dt.generate_corpus(cfg)
    assert len(utts) == 24
    tok = dt.train(cfg, utts)
    assert tok.step > 0

    mel = utts[0].mel
    ids, s_hat = tok.tokenize(mel)
    assert len(s_hat) > 0 and abs(s_hat[-1] - len(ids)) < 1e-6 * len(ids)
    rec = tok.reconstruct(ids, s_hat, len(mel))
    assert len(rec) == len(mel) and len(rec[0]) == len(mel[0])
    tok.transcribe(ids, s_hat)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ckpt.json")
        tok.save(path)
        again = dt.Tokenizer.load(path)
        assert again.tokenize(mel) == (ids, s_hat)

    print("smoke test ok:", cfg, len(ids), "tokens for", len(mel), "frames")


if __name__ == "__main__":
    main()
