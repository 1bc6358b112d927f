import itertools
import math
import random

import pytest

import jointst as jst


def log_table(rng, frames, vocab):
    rows = []
    for _ in range(frames):
        w = [math.exp(rng.gauss(0, 2)) for _ in range(vocab)]
        z = sum(w)
        rows.append([math.log(x / z) for x in w])
    return rows


def test_ctc_matches_brute_force():
    rng = random.Random(3)
    for _ in range(50):
        frames, vocab = rng.randint(1, 5), rng.randint(2, 4)
        table = log_table(rng, frames, vocab)
        target = [rng.randint(1, vocab - 1) for _ in range(rng.randint(0, 2))]
        ref = jst.ctc_brute_force(table, target, 0)
        if math.isinf(ref):
            continue
        assert abs(jst.ctc_loss(table, target, 0) - ref) < 1e-9


def test_ctc_mass_sums_to_one():
    rng = random.Random(5)
    table = log_table(rng, 3, 3)
    total = 0.0
    for n in range(4):
        for y in itertools.product([1, 2], repeat=n):
            ref = jst.ctc_brute_force(table, list(y), 0)
            total += 0.0 if math.isinf(ref) else math.exp(-ref)
    assert abs(total - 1.0) < 1e-12


def test_schedule_and_weights():
    assert jst.lr_schedule(40000) == 6e-4
    assert jst.lr_schedule(160000) == 3e-4
    w = jst.language_weights({"a": 900, "b": 100}, 1.0)
    assert w["a"] == pytest.approx(0.9)
    flat = jst.language_weights({"a": 900, "b": 100}, 100.0)
    assert abs(flat["a"] - 0.5) < 0.02


def test_masks_and_text_tools():
    pos = jst.mask_text_spans(100, 20, 0.15, 7)
    assert pos == sorted(set(pos))
    assert len(pos) == 20
    assert all(0 <= p < 50 for p in jst.mask_speech_frames(50, 0.065, 10, 1))
    assert jst.cer("abd", "abc") == pytest.approx(1 / 3)
    assert jst.edit_distance("kitten", "sitting") == 3
    assert jst.ctc_collapse([1, 1, 0, 1, 2], 0) == [1, 1, 2]
    with pytest.raises(ValueError):
        jst.cer("a", "")


def test_vocab_round_trip():
    v = jst.CharVocab.build([("en", "hello world"), ("fr", "bonjour")], 64)
    ids = v.encode("hello")
    assert v.decode(ids) == "hello"
    assert v.used <= v.size == 64


def test_presets():
    assert "paper-600m" in jst.model_preset_names()
    big = jst.model_preset("paper-2b")
    assert big["model_dim"] == 1408
    assert big["layers_contrastive"] + big["layers_mlm"] == 40
    assert jst.model_preset("paper-600m")["parameters"] < big["parameters"]


def test_tiny_pretraining_is_deterministic():
    cfg = "model.dim = 8\nmodel.ff_dim = 16\nexperiment.sentences = 8\nsynth.paired_per_language = 8\n"
    a = jst.pretrain(cfg, "mslam-ctc", seed=2, steps=3)
    b = jst.pretrain(cfg, "mslam-ctc", seed=2, steps=3)
    assert a == b
    assert len(a) == 3 and all(math.isfinite(x) for x in a)
    assert jst.grad_check_step(cfg, params=5) < 1e-4
