import json

import numpy as np
import pytest

import tars_edit as te


def small_config():
    c = te.ModelConfig()
    c.d_model = 16
    c.n_layers = 2
    c.n_heads = 2
    c.d_ff = 24
    c.vocab_size = 40
    c.max_seq_len = 16
    return c


def test_geometry_and_row_count():
    assert te.ModelConfig().scan_rows() == 1792
    c = te.ModelConfig()
    c.d_model, c.n_layers, c.n_heads, c.d_ff = 4096, 32, 32, 14336
    assert c.scan_rows() == 917504


def test_logits_shape_and_determinism():
    w = te.init_weights(small_config(), 3)
    a = te.logits(w, [2, 5, 7])
    assert a.shape == (3, 40)
    np.testing.assert_array_equal(a, te.logits(te.init_weights(small_config(), 3), [2, 5, 7]))


def test_scan_is_sorted_and_matches_numpy_cosines():
    w = te.init_weights(small_config(), 4)
    v = np.random.default_rng(0).normal(size=16).astype(np.float32)
    hits = te.scan(w, v)
    assert len(hits) == 2 * 2 * 24
    scores = [h.score for h in hits]
    assert scores == sorted(scores, reverse=True)
    top = hits[0]
    row = w.row(top.layer, top.kind, top.row).astype(np.float64)
    cos = row @ v / (np.linalg.norm(row) * np.linalg.norm(v.astype(np.float64)))
    assert abs(cos - top.score) < 1e-6


def test_reversed_target_has_unit_three_norm():
    r = te.reversed_target(np.array([2.0, 0.0, 0.0], dtype=np.float32))
    np.testing.assert_allclose(r, [-1.0, 0.0, 0.0])
    with pytest.raises(te.DomainError):
        te.reversed_target(np.zeros(3, dtype=np.float32))


def test_edit_and_revert_round_trip():
    w = te.init_weights(small_config(), 5)
    v = np.random.default_rng(1).normal(size=16).astype(np.float32)
    edited, record = te.edit(w, v, top_k=3, concept_id="demo")
    assert len(record.locations) == 3
    assert record.hash_before == w.hash()
    assert record.hash_after == edited.hash()
    layer, kind, row = record.locations[0]
    expected = -v / np.sum(np.abs(v.astype(np.float64)) ** 3) ** (1 / 3)
    np.testing.assert_allclose(edited.row(layer, kind, row), expected, atol=1e-6)
    restored = te.revert(edited, record)
    assert restored == w
    with pytest.raises(te.IntegrityError):
        te.revert(restored, record)
    with pytest.raises(te.EmptySelectionError):
        te.edit(w, v, theta=1.0)
    with pytest.raises(te.UsageError):
        te.edit(w, v, theta=0.1, top_k=2)


def test_kl_identity_and_percentile():
    w = te.init_weights(small_config(), 6)
    k = te.kl_divergence(w, w, [[2, 5, 9, 11], [2, 7, 7]])
    assert all(abs(x) <= 1e-9 for x in k["values"])
    assert te.percentile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.5


def test_targeting_through_config(tmp_path):
    words = ["pipe", "violin", "fog", "hat"]
    spec = {
        "seed": 1,
        "out_dir": str(tmp_path / "run"),
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 24, "vocab_size": 64, "max_seq_len": 48},
        "train": {"steps": 0},
        "corpus": {
            "spec": {
                "languages": [
                    {
                        "name": "en",
                        "relations": ["has", "likes"],
                        "adjectives": ["red"],
                        "nouns": ["river", "stone"],
                        "verbs": ["holds"],
                    }
                ],
                "concepts": [{"id": "holmsby", "languages": {"en": {"target": "holmsby", "attributes": words}}}],
            },
            "options": {"n_per_concept": 2, "n_background": 2, "min_facts": 2, "max_facts": 4, "code_switch": False},
        },
        "targeting": {"tau": 0.001, "batch_size": 16, "min_candidates": 8, "max_batches": 4},
        "concepts": [{"id": "holmsby", "top_k": 1}],
    }
    cfg = te.config_from_json(json.dumps(spec))
    assert cfg.concepts == ["holmsby"]
    weights, checkpoint = te.train(cfg)
    assert te.load_checkpoint(checkpoint) == weights
    edited, record, target = te.remove_concept(cfg, weights, "holmsby", top_k=1)
    assert target.retained >= 8
    assert len(record.locations) == 1
    p = te.causal_probability(cfg, edited, "holmsby", "en")
    assert 0.0 <= p <= 1.0
    with pytest.raises(te.ConfigError):
        te.causal_probability(cfg, edited, "nobody", "en")
